//! Bernstein polynomial bases on rescaled covariate intervals, their
//! tensor-product surfaces, and the difference reparameterization that turns
//! "monotone nondecreasing in ozone" into a nonnegativity cone.
//!
//! A 1-D basis of order M evaluated at x maps x to [0, 1] through the
//! interval (lo, lo + range) and returns the M+1 Bernstein weights. Surfaces
//! hold one basis per axis and a coefficient vector `psi` ordered with the
//! ozone index fastest: (psi_{0,0}, ..., psi_{M1,0}, psi_{0,1}, ...,
//! psi_{M1,M2}).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("{var} = {value} outside basis domain [{lo}, {hi}]")]
    OutOfDomain {
        var: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("{var} basis needs a positive finite range, got {range}")]
    BadRange { var: String, range: f64 },
    #[error("coefficient vector has {got} entries, surface of order ({m1}, {m2}) needs {expected}")]
    CoeffLength {
        got: usize,
        expected: usize,
        m1: usize,
        m2: usize,
    },
}

/// Bernstein basis of one covariate on [lo, lo + range].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BernsteinBasis1D {
    /// Name used in domain-error messages ("ozone", "temperature", ...).
    pub var: String,
    /// Polynomial order M; the basis has M + 1 functions.
    pub order: usize,
    pub lo: f64,
    pub range: f64,
}

impl BernsteinBasis1D {
    pub fn new(var: &str, order: usize, lo: f64, range: f64) -> Result<Self, BasisError> {
        if !(range.is_finite() && range > 0.0) || !lo.is_finite() {
            return Err(BasisError::BadRange {
                var: var.to_string(),
                range,
            });
        }
        Ok(Self {
            var: var.to_string(),
            order,
            lo,
            range,
        })
    }

    /// Basis over the observed span of `values`.
    pub fn from_values(var: &str, order: usize, values: &[f64]) -> Result<Self, BasisError> {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self::new(var, order, lo, hi - lo)
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.range
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi()
    }

    fn unit(&self, x: f64) -> Result<f64, BasisError> {
        if !self.contains(x) {
            return Err(BasisError::OutOfDomain {
                var: self.var.clone(),
                value: x,
                lo: self.lo,
                hi: self.hi(),
            });
        }
        Ok((x - self.lo) / self.range)
    }

    /// All M + 1 basis values at x. The recurrence multiplies through by the
    /// convex pair (1-u, u) one order at a time, which preserves the
    /// partition of unity to machine precision even at order 20.
    pub fn eval(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        Ok(bernstein_unit(self.unit(x)?, self.order))
    }
}

/// Bernstein weights of order `m` at u in [0, 1].
fn bernstein_unit(u: f64, m: usize) -> Vec<f64> {
    let mut b = vec![0.0; m + 1];
    b[0] = 1.0;
    let v = 1.0 - u;
    for deg in 1..=m {
        b[deg] = u * b[deg - 1];
        for k in (1..deg).rev() {
            b[k] = v * b[k] + u * b[k - 1];
        }
        b[0] *= v;
    }
    b
}

/// 1-D basis evaluation as a free function.
pub fn eval_basis_1d(basis: &BernsteinBasis1D, x: f64) -> Result<Vec<f64>, BasisError> {
    basis.eval(x)
}

/// Tensor-product Bernstein surface.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurfaceSpec {
    pub ozone_basis: BernsteinBasis1D,
    pub temp_basis: BernsteinBasis1D,
    /// Coefficients psi, ozone index fastest; length (M1+1)(M2+1).
    pub coeffs: Vec<f64>,
}

impl SurfaceSpec {
    pub fn new(
        ozone_basis: BernsteinBasis1D,
        temp_basis: BernsteinBasis1D,
        coeffs: Vec<f64>,
    ) -> Result<Self, BasisError> {
        let expected = (ozone_basis.order + 1) * (temp_basis.order + 1);
        if coeffs.len() != expected {
            return Err(BasisError::CoeffLength {
                got: coeffs.len(),
                expected,
                m1: ozone_basis.order,
                m2: temp_basis.order,
            });
        }
        Ok(Self {
            ozone_basis,
            temp_basis,
            coeffs,
        })
    }

    #[inline]
    fn idx(&self, j: usize, k: usize) -> usize {
        k * (self.ozone_basis.order + 1) + j
    }

    /// f(x1, x2) = sum_jk psi_{j,k} B_j(x1) B_k(x2).
    pub fn eval_surface(&self, x1: f64, x2: f64) -> Result<f64, BasisError> {
        let b1 = self.ozone_basis.eval(x1)?;
        let b2 = self.temp_basis.eval(x2)?;
        let mut acc = 0.0;
        for (k, w2) in b2.iter().enumerate() {
            let mut inner = 0.0;
            for (j, w1) in b1.iter().enumerate() {
                inner += self.coeffs[self.idx(j, k)] * w1;
            }
            acc += w2 * inner;
        }
        Ok(acc)
    }

    /// Partial derivative in ozone, per native unit of x1: the order-(M1-1)
    /// expansion of first differences scaled by M1 / range1.
    pub fn eval_dfdx1(&self, x1: f64, x2: f64) -> Result<f64, BasisError> {
        let m1 = self.ozone_basis.order;
        let u1 = self.ozone_basis.unit(x1)?;
        let b2 = self.temp_basis.eval(x2)?;
        if m1 == 0 {
            return Ok(0.0);
        }
        let d1 = bernstein_unit(u1, m1 - 1);
        let mut acc = 0.0;
        for (k, w2) in b2.iter().enumerate() {
            let mut inner = 0.0;
            for (j, w1) in d1.iter().enumerate() {
                inner += (self.coeffs[self.idx(j + 1, k)] - self.coeffs[self.idx(j, k)]) * w1;
            }
            acc += w2 * inner;
        }
        Ok(acc * m1 as f64 / self.ozone_basis.range)
    }

    /// Mixed partial d2f/dx1 dx2 per native units: second differences of psi
    /// on the order-(M1-1, M2-1) basis, scaled by M1 M2 / (range1 range2).
    pub fn eval_cross_deriv(&self, x1: f64, x2: f64) -> Result<f64, BasisError> {
        let m1 = self.ozone_basis.order;
        let m2 = self.temp_basis.order;
        let u1 = self.ozone_basis.unit(x1)?;
        let u2 = self.temp_basis.unit(x2)?;
        if m1 == 0 || m2 == 0 {
            return Ok(0.0);
        }
        let d1 = bernstein_unit(u1, m1 - 1);
        let d2 = bernstein_unit(u2, m2 - 1);
        let mut acc = 0.0;
        for (k, w2) in d2.iter().enumerate() {
            let mut inner = 0.0;
            for (j, w1) in d1.iter().enumerate() {
                let dd = self.coeffs[self.idx(j + 1, k + 1)] - self.coeffs[self.idx(j, k + 1)]
                    - self.coeffs[self.idx(j + 1, k)]
                    + self.coeffs[self.idx(j, k)];
                inner += dd * w1;
            }
            acc += w2 * inner;
        }
        Ok(acc * (m1 * m2) as f64 / (self.ozone_basis.range * self.temp_basis.range))
    }
}

/// Design matrix of tensor-basis rows at the given (ozone, temperature)
/// points; column order matches `SurfaceSpec::coeffs`.
pub fn tensor_design(
    ozone_basis: &BernsteinBasis1D,
    temp_basis: &BernsteinBasis1D,
    points: &[[f64; 2]],
) -> Result<DMatrix<f64>, BasisError> {
    let p1 = ozone_basis.order + 1;
    let p2 = temp_basis.order + 1;
    let mut m = DMatrix::<f64>::zeros(points.len(), p1 * p2);
    for (r, pt) in points.iter().enumerate() {
        let b1 = ozone_basis.eval(pt[0])?;
        let b2 = temp_basis.eval(pt[1])?;
        for k in 0..p2 {
            for j in 0..p1 {
                m[(r, k * p1 + j)] = b1[j] * b2[k];
            }
        }
    }
    Ok(m)
}

/// Difference transform theta = T psi: within each temperature block,
/// theta_{0,k} = psi_{0,k} and theta_{j,k} = psi_{j,k} - psi_{j-1,k} for
/// j >= 1. Block-diagonal, banded, unit lower-triangular, hence invertible.
pub fn transform_matrix(m1: usize, m2: usize) -> DMatrix<f64> {
    let p1 = m1 + 1;
    let p = p1 * (m2 + 1);
    let mut t = DMatrix::<f64>::zeros(p, p);
    for k in 0..=m2 {
        let off = k * p1;
        t[(off, off)] = 1.0;
        for j in 1..p1 {
            t[(off + j, off + j)] = 1.0;
            t[(off + j, off + j - 1)] = -1.0;
        }
    }
    t
}

/// Inverse transform psi = T^-1 theta: cumulative sums within each block.
pub fn transform_inverse(m1: usize, m2: usize) -> DMatrix<f64> {
    let p1 = m1 + 1;
    let p = p1 * (m2 + 1);
    let mut t = DMatrix::<f64>::zeros(p, p);
    for k in 0..=m2 {
        let off = k * p1;
        for j in 0..p1 {
            for i in 0..=j {
                t[(off + j, off + i)] = 1.0;
            }
        }
    }
    t
}

/// Coefficients in theta coordinates that satisfy the monotone cone:
/// every entry with ozone index j >= 1 is nonnegative.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MonotoneCoeffs {
    pub m1: usize,
    pub m2: usize,
    pub theta: Vec<f64>,
}

impl MonotoneCoeffs {
    /// psi = block cumulative sums of theta.
    pub fn to_psi(&self) -> Vec<f64> {
        let p1 = self.m1 + 1;
        let mut psi = self.theta.clone();
        for k in 0..=self.m2 {
            let off = k * p1;
            for j in 1..p1 {
                psi[off + j] += psi[off + j - 1];
            }
        }
        psi
    }

    /// Inverse of `to_psi`: block first differences along the ozone index.
    pub fn from_psi(m1: usize, m2: usize, psi: &[f64]) -> MonotoneCoeffs {
        let p1 = m1 + 1;
        assert_eq!(psi.len(), p1 * (m2 + 1), "coefficient length");
        let mut theta = psi.to_vec();
        for k in 0..=m2 {
            let off = k * p1;
            for j in (1..p1).rev() {
                theta[off + j] -= theta[off + j - 1];
            }
        }
        MonotoneCoeffs { m1, m2, theta }
    }
}

/// Project latent theta* onto the monotone cone: block-level entries
/// (j = 0) pass through, difference entries (j >= 1) are clipped at zero.
pub fn truncate_theta(theta_star: &[f64], m1: usize, m2: usize) -> MonotoneCoeffs {
    let p1 = m1 + 1;
    let mut theta = theta_star.to_vec();
    for k in 0..=m2 {
        for j in 1..p1 {
            let i = k * p1 + j;
            if theta[i] < 0.0 {
                theta[i] = 0.0;
            }
        }
    }
    MonotoneCoeffs { m1, m2, theta }
}

/// Truncation applied in place on a slice (hot path of the sampler).
pub fn truncate_theta_inplace(theta: &mut [f64], m1: usize, m2: usize) {
    let p1 = m1 + 1;
    for k in 0..=m2 {
        for j in 1..p1 {
            let i = k * p1 + j;
            if theta[i] < 0.0 {
                theta[i] = 0.0;
            }
        }
    }
}

/// True for coordinates constrained to be nonnegative (ozone index >= 1).
#[inline]
pub fn is_difference_coord(i: usize, m1: usize) -> bool {
    i % (m1 + 1) != 0
}
