//! Overdispersed Poisson regression by iteratively reweighted least squares
//! with a log link and offset. The weighted solve uses column-pivoted QR, so
//! exact collinearity is detected and reported instead of silently absorbed;
//! the quasi-likelihood dispersion scales the information-matrix covariance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("response has {y} entries but design has {rows} rows")]
    DimensionMismatch { y: usize, rows: usize },
    #[error("offset has {got} entries, expected {want}")]
    OffsetLength { got: usize, want: usize },
    #[error("need more rows than columns: {rows} rows, {cols} columns")]
    NotEnoughRows { rows: usize, cols: usize },
    #[error("response must be nonnegative and finite; entry {index} is {value}")]
    BadResponse { index: usize, value: f64 },
    #[error("response is identically zero; the log-rate is unbounded below")]
    AllZeroResponse,
    #[error("design is rank deficient; aliased columns {aliased:?}")]
    RankDeficient { aliased: Vec<usize> },
    #[error("IRLS did not converge in {iterations} iterations (last deviance {deviance})")]
    NotConverged {
        iterations: usize,
        deviance: f64,
        last: Box<GlmFit>,
    },
    #[error("non-finite working quantities at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("covariance block split at {n_beta} exceeds dimension {dim}")]
    BlockSize { n_beta: usize, dim: usize },
}

/// Converged fit: coefficients, dispersion-scaled covariance, and the
/// deviance path (non-increasing thanks to step-halving).
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: DVector<f64>,
    /// dispersion x (X' W X)^-1 at the final coefficients.
    pub covariance: DMatrix<f64>,
    /// Pearson chi-square over n - p.
    pub dispersion: f64,
    pub deviance: f64,
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    pub p: usize,
}

/// Covariance of (beta, gamma) split with the surface block leading.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CovBlocks {
    pub v11: DMatrix<f64>,
    pub v12: DMatrix<f64>,
    pub v21: DMatrix<f64>,
    pub v22: DMatrix<f64>,
}

const RANK_TOL: f64 = 1e-10;
const MU_FLOOR: f64 = 1e-10;
const MAX_HALVINGS: usize = 10;

/// Original-order indices of columns that a rank-revealing QR would drop.
/// Empty means full column rank at relative tolerance `RANK_TOL`.
pub fn aliased_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    if p == 0 {
        return Vec::new();
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let perm = permutation_indices(&qr, p);
    let lead = r[(0, 0)].abs();
    let mut aliased = Vec::new();
    for i in 0..p {
        let d = if i < r.nrows() { r[(i, i)].abs() } else { 0.0 };
        if d <= RANK_TOL * lead {
            aliased.push(perm[i]);
        }
    }
    aliased.sort_unstable();
    aliased
}

/// perm[i] = original column index sitting at pivot position i, recovered by
/// pushing an index row through the recorded column swaps.
pub(crate) fn permutation_indices(
    qr: &nalgebra::linalg::ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    p: usize,
) -> Vec<usize> {
    let mut tag = nalgebra::RowDVector::<f64>::from_iterator(p, (0..p).map(|i| i as f64));
    qr.p().permute_columns(&mut tag);
    tag.iter().map(|v| *v as usize).collect()
}

struct WlsSolution {
    beta: DVector<f64>,
    /// (A' A)^-1 for the weighted design A.
    xtx_inv: DMatrix<f64>,
}

/// Least squares for A beta ~ b via column-pivoted QR; errors on rank
/// deficiency with the offending original column indices.
fn solve_wls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<WlsSolution, GlmError> {
    let p = a.ncols();
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let perm = permutation_indices(&qr, p);
    let lead = r[(0, 0)].abs();
    let mut aliased = Vec::new();
    for i in 0..p {
        if r[(i, i)].abs() <= RANK_TOL * lead {
            aliased.push(perm[i]);
        }
    }
    if !aliased.is_empty() {
        aliased.sort_unstable();
        return Err(GlmError::RankDeficient { aliased });
    }
    let q = qr.q();
    let qtb = q.transpose() * b;
    let z = r
        .solve_upper_triangular(&qtb)
        .ok_or(GlmError::RankDeficient { aliased: vec![] })?;
    let mut beta = DVector::<f64>::zeros(p);
    for i in 0..p {
        beta[perm[i]] = z[i];
    }
    let rinv = r
        .solve_upper_triangular(&DMatrix::<f64>::identity(p, p))
        .ok_or(GlmError::RankDeficient { aliased: vec![] })?;
    let core = &rinv * rinv.transpose();
    let mut xtx_inv = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            xtx_inv[(perm[i], perm[j])] = core[(i, j)];
        }
    }
    Ok(WlsSolution { beta, xtx_inv })
}

fn poisson_deviance(y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for i in 0..y.len() {
        let term = if y[i] > 0.0 {
            y[i] * (y[i] / mu[i]).ln() - (y[i] - mu[i])
        } else {
            mu[i]
        };
        dev += 2.0 * term;
    }
    dev
}

/// Fit counts ~ Poisson(exp(offset + X b)) by IRLS with quasi-likelihood
/// dispersion. Convergence: relative deviance change below `tol`
/// (denominator |deviance| + 0.1); deviance increases trigger step-halving,
/// up to 10 halvings per iteration.
pub fn fit_poisson_quasi(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    offset: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<GlmFit, GlmError> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(GlmError::DimensionMismatch { y: y.len(), rows: n });
    }
    if offset.len() != n {
        return Err(GlmError::OffsetLength {
            got: offset.len(),
            want: n,
        });
    }
    if n <= p {
        return Err(GlmError::NotEnoughRows { rows: n, cols: p });
    }
    let mut all_zero = true;
    for i in 0..n {
        if !(y[i].is_finite() && y[i] >= 0.0) {
            return Err(GlmError::BadResponse {
                index: i,
                value: y[i],
            });
        }
        if y[i] > 0.0 {
            all_zero = false;
        }
    }
    if all_zero {
        return Err(GlmError::AllZeroResponse);
    }

    let mut mu = y.map(|v| v + 0.5);
    let mut eta = mu.map(f64::ln);
    let mut beta = DVector::<f64>::zeros(p);
    let mut deviance = poisson_deviance(y, &mu);
    let mut trace = Vec::with_capacity(max_iter);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_xtx_inv = DMatrix::<f64>::zeros(p, p);
    let mut last_w = mu.clone();

    for iter in 0..max_iter {
        iterations = iter + 1;
        let w_sqrt = mu.map(|m| m.max(MU_FLOOR).sqrt());
        // working response without offset
        let mut z = DVector::<f64>::zeros(n);
        for i in 0..n {
            z[i] = (eta[i] - offset[i]) + (y[i] - mu[i]) / mu[i].max(MU_FLOOR);
        }
        let mut a = x.clone();
        for i in 0..n {
            for j in 0..p {
                a[(i, j)] *= w_sqrt[i];
            }
        }
        let b = z.component_mul(&w_sqrt);
        let sol = solve_wls(&a, &b)?;
        let mut beta_new = sol.beta;

        let mut eta_new = x * &beta_new + offset;
        let mut mu_new = eta_new.map(f64::exp);
        let mut dev_new = poisson_deviance(y, &mu_new);
        let mut halvings = 0;
        while (!dev_new.is_finite() || dev_new > deviance + 1e-10 * (deviance.abs() + 1.0))
            && halvings < MAX_HALVINGS
            && iter > 0
        {
            beta_new = 0.5 * (&beta_new + &beta);
            eta_new = x * &beta_new + offset;
            mu_new = eta_new.map(f64::exp);
            dev_new = poisson_deviance(y, &mu_new);
            halvings += 1;
        }
        if !dev_new.is_finite() {
            return Err(GlmError::NonFinite { iteration: iter });
        }

        let change = (dev_new - deviance).abs() / (dev_new.abs() + 0.1);
        beta = beta_new;
        eta = eta_new;
        mu = mu_new;
        deviance = dev_new;
        trace.push(deviance);
        last_xtx_inv = sol.xtx_inv;
        last_w = mu.clone();
        if change < tol {
            converged = true;
            break;
        }
    }

    // information matrix at the converged coefficients
    let w_sqrt = last_w.map(|m| m.max(MU_FLOOR).sqrt());
    let mut a = x.clone();
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] *= w_sqrt[i];
        }
    }
    // reuse the last inner solve if the weights are already final; one more
    // factorization keeps the covariance tied to the reported coefficients
    let qr = a.col_piv_qr();
    let r = qr.r();
    let perm = permutation_indices(&qr, p);
    let lead = r[(0, 0)].abs();
    if (0..p).any(|i| r[(i, i)].abs() <= RANK_TOL * lead) {
        // fall back on the last iteration's inverse; rank was verified there
        log::warn!("final-information refactorization lost rank; using last IRLS inverse");
    } else if let Some(rinv) = r.solve_upper_triangular(&DMatrix::<f64>::identity(p, p)) {
        let core = &rinv * rinv.transpose();
        for i in 0..p {
            for j in 0..p {
                last_xtx_inv[(perm[i], perm[j])] = core[(i, j)];
            }
        }
    }

    let mut pearson = 0.0;
    for i in 0..n {
        let m = mu[i].max(MU_FLOOR);
        pearson += (y[i] - m) * (y[i] - m) / m;
    }
    let dispersion = pearson / (n - p) as f64;
    let covariance = &last_xtx_inv * dispersion;

    let fit = GlmFit {
        coefficients: beta,
        covariance,
        dispersion,
        deviance,
        deviance_trace: trace,
        iterations,
        converged,
        n,
        p,
    };
    if !converged {
        return Err(GlmError::NotConverged {
            iterations,
            deviance,
            last: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Split a (p x p) covariance into blocks with the first `n_beta` rows and
/// columns leading: (V11, V12, V21, V22). V21 is the exact transpose of V12.
pub fn partition_covariance(cov: &DMatrix<f64>, n_beta: usize) -> Result<CovBlocks, GlmError> {
    let dim = cov.nrows();
    if n_beta > dim {
        return Err(GlmError::BlockSize { n_beta, dim });
    }
    let k = dim - n_beta;
    let v11 = cov.view((0, 0), (n_beta, n_beta)).into_owned();
    let v12 = cov.view((0, n_beta), (n_beta, k)).into_owned();
    let v21 = v12.transpose();
    let v22 = cov.view((n_beta, n_beta), (k, k)).into_owned();
    Ok(CovBlocks { v11, v12, v21, v22 })
}
