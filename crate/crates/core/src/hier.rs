//! Second-stage pooling of city surface coefficients.
//!
//! Each city's first-stage estimate `beta_hat` is treated as a Gaussian
//! observation of its local surface, whose mean is a projection `A_c theta_c`
//! of pooled-basis coefficients. The pooled coefficients live on a latent
//! field `theta*` that is Gaussian across cities: within a city the
//! covariance is a Kronecker product `S2 (x) S1` over the temperature and
//! ozone directions, and across cities the field is correlated through an
//! exponential spatial kernel `R(rho)`. The field is centred on a shared
//! mean surface `mu`, itself centred on a scalar grand mean `mu0`. When the
//! monotone link is on, the likelihood sees the cone projection of `theta*`
//! (difference coordinates clipped at zero), which makes every sampled
//! surface nondecreasing in ozone while the latent field stays Gaussian.
//!
//! The sampler is a systematic-scan Gibbs chain with one Metropolis step for
//! the spatial range `rho`. All full conditionals are standard except the
//! scalar conditionals of the constrained `theta*` coordinates, which are
//! two-piece normal mixtures handled by `draw_coordinate`.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{
    is_difference_coord, tensor_design, transform_inverse, truncate_theta_inplace, BasisError,
};
use crate::data::{great_circle_km, CityMeta};
use crate::glm::permutation_indices;
use crate::math::{
    batch_means_se, chol_inverse, derive_rng, inv_wishart_sample, log_norm_cdf, mean, sample_sd,
    sample_truncated_normal_lower, sample_truncated_normal_upper, symmetrized, MathError,
};
use crate::stage1::{GlobalBases, Stage1Fit, Stage1Output};

#[derive(Debug, Error)]
pub enum HierError {
    #[error("chain configuration: {0}")]
    Config(String),
    #[error("no city fits to pool")]
    NoFits,
    #[error("city {city_id}: surface covariance block is not positive definite")]
    NonPdCovariance { city_id: String },
    #[error("city {city_id}: local design is rank deficient, cannot build the projection")]
    RankDeficient { city_id: String },
    #[error("city {city_id}: {source}")]
    Basis {
        city_id: String,
        source: BasisError,
    },
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("{path}: {message}")]
    Serialization { path: String, message: String },
}

/// Hyperparameters of the second-stage priors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Hyperpriors {
    /// Prior standard deviation of the grand mean `mu0`.
    pub tau0: f64,
    /// Shape of the gamma prior on `1/tau`.
    pub a_tau: f64,
    /// Rate of the gamma prior on `1/tau`.
    pub b_tau: f64,
    /// Prior mean of `log rho` (rho is the spatial range in km).
    pub mu_rho: f64,
    /// Prior standard deviation of `log rho`.
    pub sigma_rho: f64,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Hyperpriors {
            tau0: 100.0,
            a_tau: 0.001,
            b_tau: 0.001,
            mu_rho: 7.0,
            sigma_rho: 10.0,
        }
    }
}

impl Hyperpriors {
    fn validate(&self) -> Result<(), HierError> {
        let ok = self.tau0 > 0.0
            && self.a_tau > 0.0
            && self.b_tau > 0.0
            && self.sigma_rho > 0.0
            && self.mu_rho.is_finite();
        if ok {
            Ok(())
        } else {
            Err(HierError::Config(
                "hyperparameters must be positive (tau0, a_tau, b_tau, sigma_rho) \
                 with finite mu_rho"
                    .to_string(),
            ))
        }
    }
}

/// Run-length and mode switches for the Gibbs chain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Correlate cities through the exponential kernel; when false the
    /// cross-city correlation matrix is the identity.
    pub spatial: bool,
    /// Apply the monotone cone link: the likelihood sees clipped
    /// coefficients and constrained coordinates get two-piece conditionals.
    pub monotone: bool,
    /// Drop the city likelihood entirely and sample the prior (calibration
    /// runs and prior-predictive checks).
    pub prior_only: bool,
    /// Starting random-walk standard deviation for `log rho`; adapted
    /// toward a 0.3 acceptance rate during burn-in, then frozen.
    pub initial_step_sd: f64,
    /// Repair a non-positive-definite stage-one covariance block by
    /// flooring its eigenvalues instead of failing. Repairs are logged.
    pub repair_v11: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 20_000,
            burn_in: 10_000,
            thin: 10,
            seed: 1,
            spatial: true,
            monotone: true,
            prior_only: false,
            initial_step_sd: 0.5,
            repair_v11: false,
        }
    }
}

impl ChainConfig {
    fn validate(&self) -> Result<(), HierError> {
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(HierError::Config(format!(
                "need burn_in < iterations, got {} and {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 || self.thin > self.iterations - self.burn_in {
            return Err(HierError::Config(format!(
                "thin {} must be in 1..={}",
                self.thin,
                self.iterations - self.burn_in
            )));
        }
        if !(self.initial_step_sd > 0.0 && self.initial_step_sd.is_finite()) {
            return Err(HierError::Config(format!(
                "initial_step_sd {} must be positive",
                self.initial_step_sd
            )));
        }
        Ok(())
    }
}

/// One retained state of the chain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HierDraw {
    /// Latent pooled coefficients per city, cone not applied.
    pub theta_star: Vec<DVector<f64>>,
    /// Shared mean surface coefficients.
    pub mu: DVector<f64>,
    pub mu0: f64,
    pub tau: f64,
    pub rho: f64,
    /// Ozone-direction scale matrix.
    pub s1: DMatrix<f64>,
    /// Temperature-direction scale matrix.
    pub s2: DMatrix<f64>,
}

/// Thinned posterior draws plus the bookkeeping needed to interpret them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PosteriorSample {
    pub city_ids: Vec<String>,
    pub m1: usize,
    pub m2: usize,
    pub monotone: bool,
    pub spatial: bool,
    pub draws: Vec<HierDraw>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Acceptance rate of the `log rho` step after burn-in; 1.0 when the
    /// update never ran (nonspatial chains).
    pub acceptance_rho: f64,
    /// Coordinate updates skipped because both mixture weights underflowed.
    pub underflow_skips: u64,
    /// Scale-matrix draws that needed diagonal jitter before inversion.
    pub jitter_redraws: u64,
}

impl PosteriorSample {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_cities(&self) -> usize {
        self.city_ids.len()
    }

    pub fn surface_dim(&self) -> usize {
        (self.m1 + 1) * (self.m2 + 1)
    }

    /// Cone-mapped coefficients of one retained draw for one city. For
    /// unconstrained chains this is the latent vector itself.
    pub fn theta(&self, draw: usize, city: usize) -> DVector<f64> {
        let mut th = self.draws[draw].theta_star[city].clone();
        if self.monotone {
            truncate_theta_inplace(th.as_mut_slice(), self.m1, self.m2);
        }
        th
    }

    /// Posterior mean of the cone-mapped coefficients for one city,
    /// averaging the clipped draws rather than clipping the average.
    pub fn theta_mean(&self, city: usize) -> DVector<f64> {
        let mut acc = DVector::zeros(self.surface_dim());
        for d in 0..self.draws.len() {
            acc += self.theta(d, city);
        }
        acc / self.draws.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), HierError> {
        let file = std::fs::File::create(path).map_err(|e| HierError::Serialization {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| HierError::Serialization {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<PosteriorSample, HierError> {
        let file = std::fs::File::open(path).map_err(|e| HierError::Serialization {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| HierError::Serialization {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// One row per retained draw per city: draw index, city, cone-mapped
    /// coefficients, then the shared scalars of that draw.
    pub fn write_draws_csv(&self, path: &Path) -> Result<(), HierError> {
        let to_err = |message: String| HierError::Serialization {
            path: path.display().to_string(),
            message,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
        let p1 = self.m1 + 1;
        let mut header = vec!["draw".to_string(), "city_id".to_string()];
        for i in 0..self.surface_dim() {
            header.push(format!("theta_{}_{}", i % p1, i / p1));
        }
        header.extend(["mu0", "tau", "rho"].map(String::from));
        w.write_record(&header).map_err(|e| to_err(e.to_string()))?;
        for (d, draw) in self.draws.iter().enumerate() {
            for (c, city_id) in self.city_ids.iter().enumerate() {
                let theta = self.theta(d, c);
                let mut row = vec![d.to_string(), city_id.clone()];
                row.extend(theta.iter().map(|v| v.to_string()));
                row.push(draw.mu0.to_string());
                row.push(draw.tau.to_string());
                row.push(draw.rho.to_string());
                w.write_record(&row).map_err(|e| to_err(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| to_err(e.to_string()))
    }

    /// Per-parameter trace summaries (mean, sd, batch-means standard error)
    /// plus the rho acceptance rate.
    pub fn write_diagnostics_csv(&self, path: &Path) -> Result<(), HierError> {
        let to_err = |message: String| HierError::Serialization {
            path: path.display().to_string(),
            message,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
        w.write_record(["parameter", "mean", "sd", "batch_se"])
            .map_err(|e| to_err(e.to_string()))?;
        let mut write_chain = |name: &str, chain: &[f64]| -> Result<(), HierError> {
            let se = batch_means_se(chain, 20.min(chain.len()));
            w.write_record([
                name.to_string(),
                mean(chain).to_string(),
                sample_sd(chain).to_string(),
                se.to_string(),
            ])
            .map_err(|e| to_err(e.to_string()))
        };
        let pull = |f: &dyn Fn(&HierDraw) -> f64| -> Vec<f64> { self.draws.iter().map(f).collect() };
        write_chain("tau", &pull(&|d| d.tau))?;
        write_chain("mu0", &pull(&|d| d.mu0))?;
        write_chain("rho", &pull(&|d| d.rho))?;
        write_chain("log_rho", &pull(&|d| d.rho.ln()))?;
        let p1 = self.m1 + 1;
        for i in 0..self.surface_dim() {
            let chain: Vec<f64> = self.draws.iter().map(|d| d.mu[i]).collect();
            write_chain(&format!("mu_{}_{}", i % p1, i / p1), &chain)?;
        }
        for (c, city_id) in self.city_ids.iter().enumerate() {
            for i in 0..self.surface_dim() {
                let chain: Vec<f64> =
                    (0..self.draws.len()).map(|d| self.theta(d, c)[i]).collect();
                write_chain(&format!("theta_{}_{}_{}", city_id, i % p1, i / p1), &chain)?;
            }
        }
        let mut w2 = w;
        w2.write_record([
            "acceptance_rho".to_string(),
            self.acceptance_rho.to_string(),
            "0".to_string(),
            "0".to_string(),
        ])
        .map_err(|e| to_err(e.to_string()))?;
        w2.flush().map_err(|e| to_err(e.to_string()))
    }
}

/// Pairwise great-circle distances in km between city centroids.
pub fn distance_matrix(metas: &[CityMeta]) -> DMatrix<f64> {
    let n = metas.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            great_circle_km(metas[i].lat, metas[i].lon, metas[j].lat, metas[j].lon)
        }
    })
}

/// Least-squares solve with a matrix right-hand side via column-pivoted QR.
/// Returns None when the design loses rank.
fn qr_least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = a.ncols();
    if a.nrows() < p {
        return None;
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let tol = 1e-10 * r[(0, 0)].abs();
    if (0..p).any(|i| r[(i, i)].abs() <= tol) {
        return None;
    }
    let z = qr.q().transpose() * b;
    let x = r.solve_upper_triangular(&z)?;
    let perm = permutation_indices(&qr, p);
    let mut out = DMatrix::zeros(p, b.ncols());
    for i in 0..p {
        out.row_mut(perm[i]).copy_from(&x.row(i));
    }
    Some(out)
}

/// Projection from pooled difference coordinates to the city's local basis:
/// the least-squares fit of the pooled tensor design (times the cumulative
/// transform) onto the local tensor design, evaluated at the city's own
/// covariate points. Computed by orthogonal decomposition, never through
/// normal equations.
pub fn projection_matrix(
    fit: &Stage1Fit,
    global: &GlobalBases,
    t_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>, HierError> {
    projection_from_points(
        &fit.surf_points,
        &fit.ozone_basis,
        &fit.temp_basis,
        global,
        t_inv,
        &fit.meta.city_id,
    )
}

pub(crate) fn projection_from_points(
    points: &[[f64; 2]],
    local_ozone: &crate::basis::BernsteinBasis1D,
    local_temp: &crate::basis::BernsteinBasis1D,
    global: &GlobalBases,
    t_inv: &DMatrix<f64>,
    city_id: &str,
) -> Result<DMatrix<f64>, HierError> {
    let wrap = |source: BasisError| HierError::Basis {
        city_id: city_id.to_string(),
        source,
    };
    let local = tensor_design(local_ozone, local_temp, points).map_err(wrap)?;
    let pooled =
        tensor_design(&global.ozone_basis(), &global.temp_basis(), points).map_err(wrap)? * t_inv;
    qr_least_squares(&local, &pooled).ok_or_else(|| HierError::RankDeficient {
        city_id: city_id.to_string(),
    })
}

/// Gaussian log-likelihood of the first-stage estimate at mean `a * theta`
/// with covariance factored as `v11_chol`, normalizing constant included.
pub fn log_likelihood_stage2(
    beta_hat: &DVector<f64>,
    a: &DMatrix<f64>,
    v11_chol: &Cholesky<f64, Dyn>,
    theta: &DVector<f64>,
) -> f64 {
    let r = beta_hat - a * theta;
    let solved = v11_chol.solve(&r);
    let l = v11_chol.l();
    let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    let p = beta_hat.len() as f64;
    -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&solved))
}

/// Posterior mean of the confounder coefficients given pooled surface
/// coefficients: the estimate plus the cross-covariance correction
/// `v21 v11^{-1} (a theta - beta_hat)`.
pub fn gamma_posterior_mean(
    fit: &Stage1Fit,
    a: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<DVector<f64>, HierError> {
    let chol =
        Cholesky::new(symmetrized(&fit.v.v11)).ok_or_else(|| HierError::NonPdCovariance {
            city_id: fit.meta.city_id.clone(),
        })?;
    Ok(gamma_update_core(
        &fit.gamma_hat,
        &fit.v.v21,
        &chol,
        &(a * theta - &fit.beta_hat),
    ))
}

fn gamma_update_core(
    gamma_hat: &DVector<f64>,
    v21: &DMatrix<f64>,
    v11_chol: &Cholesky<f64, Dyn>,
    mean_shift: &DVector<f64>,
) -> DVector<f64> {
    gamma_hat + v21 * v11_chol.solve(mean_shift)
}

/// One draw from the scalar conditional
/// `pi(x) ~ N(x; a_pr, s_pr^2) * exp(-lambda t(x)^2 / 2 + eta t(x))`
/// where `t(x) = max(x, 0)` when `truncated` and `t(x) = x` otherwise.
/// The truncated case is a two-piece mixture: a normal restricted to the
/// negative axis (prior piece, likelihood constant there) and a tilted
/// normal restricted to the positive axis. Returns None when both mixture
/// weights lose all precision, in which case the caller keeps the current
/// value.
pub(crate) fn draw_coordinate<R: Rng + ?Sized>(
    a_pr: f64,
    s_pr: f64,
    lambda: f64,
    eta: f64,
    truncated: bool,
    rng: &mut R,
) -> Option<f64> {
    let s2 = s_pr * s_pr;
    let q2 = 1.0 / (1.0 / s2 + lambda);
    let b = q2 * (a_pr / s2 + eta);
    let q = q2.sqrt();
    if !truncated {
        let z: f64 = StandardNormal.sample(rng);
        return Some(b + q * z);
    }
    let log_w_minus = log_norm_cdf(-a_pr / s_pr);
    let log_w_plus =
        (q / s_pr).ln() + 0.5 * b * b / q2 - 0.5 * a_pr * a_pr / s2 + log_norm_cdf(b / q);
    if !log_w_minus.is_finite() && !log_w_plus.is_finite() {
        return None;
    }
    let p_minus = 1.0 / (1.0 + (log_w_plus - log_w_minus).exp());
    if rng.random::<f64>() < p_minus {
        Some(sample_truncated_normal_upper(a_pr, s_pr, 0.0, rng))
    } else {
        Some(sample_truncated_normal_lower(b, q, 0.0, rng))
    }
}

/// Draw `tau` from its inverse-gamma full conditional given the quadratic
/// form `q_form = (mu - mu0 1)' K^{-1} (mu - mu0 1)` of dimension `p`.
pub(crate) fn draw_tau<R: Rng + ?Sized>(
    a_tau: f64,
    b_tau: f64,
    q_form: f64,
    p: usize,
    rng: &mut R,
) -> f64 {
    let shape = a_tau + 0.5 * p as f64;
    let rate = b_tau + 0.5 * q_form;
    let phi = Gamma::new(shape, 1.0 / rate)
        .expect("positive gamma parameters")
        .sample(rng);
    1.0 / phi
}

/// Log of the spatial-range conditional on the log scale (random walk on
/// `log rho` needs no Jacobian): the Gaussian-field term in `R(rho)` plus
/// the log-normal prior.
fn log_rho_target(
    p: usize,
    logdet_r: f64,
    tr_rinv_h: f64,
    log_rho: f64,
    hyper: &Hyperpriors,
) -> f64 {
    let z = (log_rho - hyper.mu_rho) / hyper.sigma_rho;
    -0.5 * (p as f64 * logdet_r + tr_rinv_h) - 0.5 * z * z
}

/// Symmetrize and, when `repair` is set, floor the eigenvalues of a
/// stage-one covariance block that fails its Cholesky factorization.
fn prepare_v11(
    v11: &DMatrix<f64>,
    repair: bool,
    city_id: &str,
) -> Result<DMatrix<f64>, HierError> {
    let sym = symmetrized(v11);
    if Cholesky::new(sym.clone()).is_some() {
        return Ok(sym);
    }
    if !repair {
        return Err(HierError::NonPdCovariance {
            city_id: city_id.to_string(),
        });
    }
    let dim = sym.nrows();
    let floor = 1e-10 * sym.trace().abs() / dim as f64 + f64::MIN_POSITIVE;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = DVector::from_fn(dim, |i, _| eig.eigenvalues[i].max(floor));
    log::warn!("city {city_id}: covariance block repaired by flooring eigenvalues at {floor:e}");
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    Ok(symmetrized(&scaled))
}

/// Inverse-Wishart draw that retries with growing diagonal jitter on the
/// scale matrix when the factorization fails, counting each retry.
fn safe_inv_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
    jitter: &mut u64,
) -> Result<DMatrix<f64>, HierError> {
    let p = scale.nrows();
    let mut s = scale.clone();
    for attempt in 0..5 {
        if attempt > 0 {
            let bump = 1e-10 * s.trace().abs() / p as f64 * 10f64.powi(attempt);
            for i in 0..p {
                s[(i, i)] += bump;
            }
            *jitter += 1;
            log::warn!("scale matrix jittered before inverse-Wishart draw (attempt {attempt})");
        }
        match inv_wishart_sample(df, &s, rng) {
            Ok(m) => return Ok(m),
            Err(MathError::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(HierError::Math(MathError::NotPositiveDefinite {
        rows: p,
        cols: p,
    }))
}

/// Per-city quantities that do not change over the chain.
struct CityWork {
    /// Likelihood precision in pooled coordinates, `a' v11^{-1} a`.
    lambda: DMatrix<f64>,
    /// Likelihood linear term, `a' v11^{-1} beta_hat`.
    m_like: DVector<f64>,
}

struct Sampler<'a> {
    cities: Vec<CityWork>,
    hyper: &'a Hyperpriors,
    config: &'a ChainConfig,
    distances: DMatrix<f64>,
    m1: usize,
    p1: usize,
    p2: usize,
    p: usize,
    n: usize,
    // Chain state.
    theta_star: Vec<DVector<f64>>,
    mu: DVector<f64>,
    mu0: f64,
    tau: f64,
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
    log_rho: f64,
    // Derived from the state, refreshed when the inputs change.
    s1_inv: DMatrix<f64>,
    s2_inv: DMatrix<f64>,
    l1: DMatrix<f64>,
    l2: DMatrix<f64>,
    kinv: DMatrix<f64>,
    rinv: DMatrix<f64>,
    logdet_r: f64,
    s_r: f64,
    // Adaptation and counters.
    step_sd: f64,
    underflow: u64,
    jitter: u64,
    accept_post: u64,
    updates_post: u64,
}

impl<'a> Sampler<'a> {
    /// Rebuild the Kronecker precision and scale factors after S1/S2 move.
    fn refresh_scales(&mut self) -> Result<(), HierError> {
        self.s1_inv = chol_inverse(&self.s1)?;
        self.s2_inv = chol_inverse(&self.s2)?;
        self.kinv = self.s2_inv.kronecker(&self.s1_inv);
        let c1 = Cholesky::new(self.s1.clone()).ok_or(MathError::NotPositiveDefinite {
            rows: self.p1,
            cols: self.p1,
        })?;
        let c2 = Cholesky::new(self.s2.clone()).ok_or(MathError::NotPositiveDefinite {
            rows: self.p2,
            cols: self.p2,
        })?;
        self.l1 = c1.l();
        self.l2 = c2.l();
        Ok(())
    }

    /// Rebuild the cross-city correlation pieces for the current rho.
    fn refresh_spatial(&mut self) -> Result<(), HierError> {
        if !self.config.spatial {
            self.rinv = DMatrix::identity(self.n, self.n);
            self.logdet_r = 0.0;
            self.s_r = self.n as f64;
            return Ok(());
        }
        let rho = self.log_rho.exp();
        let r = DMatrix::from_fn(self.n, self.n, |i, j| (-self.distances[(i, j)] / rho).exp());
        let chol = Cholesky::new(r).ok_or(MathError::NotPositiveDefinite {
            rows: self.n,
            cols: self.n,
        })?;
        let l = chol.l();
        self.logdet_r = (0..self.n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        self.rinv = chol.inverse();
        self.s_r = self.rinv.sum();
        Ok(())
    }

    /// Systematic coordinate sweep of every city's latent vector.
    fn sweep_theta<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let likelihood = !self.config.prior_only;
        for c in 0..self.n {
            // Prior conditional on the other cities: N(m_c, v_c K).
            let pcc = self.rinv[(c, c)];
            let v_c = 1.0 / pcc;
            let mut m_c = self.mu.clone();
            for cp in 0..self.n {
                if cp == c {
                    continue;
                }
                let coef = self.rinv[(c, cp)];
                if coef != 0.0 {
                    m_c.axpy(-coef / pcc, &(&self.theta_star[cp] - &self.mu), 1.0);
                }
            }
            let mut theta_c = std::mem::replace(&mut self.theta_star[c], DVector::zeros(0));
            let mut g = &self.kinv * (&theta_c - &m_c);
            // Likelihood bookkeeping: t is the linked vector the likelihood
            // sees, h = m_like - lambda t its residual linear term.
            let mut t = theta_c.clone();
            if likelihood && self.config.monotone {
                truncate_theta_inplace(t.as_mut_slice(), self.m1, self.m1_to_m2());
            }
            let mut h = if likelihood {
                &self.cities[c].m_like - &self.cities[c].lambda * &t
            } else {
                DVector::zeros(0)
            };
            for i in 0..self.p {
                let kii = self.kinv[(i, i)];
                let s_pr2 = v_c / kii;
                let a_pr = theta_c[i] - g[i] / kii;
                let constrained = self.config.monotone && is_difference_coord(i, self.m1);
                let (lam_i, eta_i, truncated) = if likelihood {
                    let lam = self.cities[c].lambda[(i, i)];
                    (lam, h[i] + lam * t[i], constrained)
                } else {
                    (0.0, 0.0, false)
                };
                match draw_coordinate(a_pr, s_pr2.sqrt(), lam_i, eta_i, truncated, rng) {
                    None => self.underflow += 1,
                    Some(x) => {
                        let delta = x - theta_c[i];
                        if delta != 0.0 {
                            g.axpy(delta, &self.kinv.column(i), 1.0);
                            theta_c[i] = x;
                            if likelihood {
                                let t_new = if constrained { x.max(0.0) } else { x };
                                let dt = t_new - t[i];
                                if dt != 0.0 {
                                    h.axpy(-dt, &self.cities[c].lambda.column(i), 1.0);
                                    t[i] = t_new;
                                }
                            }
                        }
                    }
                }
            }
            self.theta_star[c] = theta_c;
        }
    }

    // The temperature order is recoverable from dimensions; kept as a
    // helper so truncation calls read naturally.
    fn m1_to_m2(&self) -> usize {
        self.p2 - 1
    }

    /// Shared mean surface: precision-weighted blend of the field average
    /// and the grand mean, drawn with the Kronecker square root.
    fn update_mu<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let ones = DVector::from_element(self.n, 1.0);
        let weights = &self.rinv * ones;
        let mut w = DVector::zeros(self.p);
        for c in 0..self.n {
            w.axpy(weights[c], &self.theta_star[c], 1.0);
        }
        let denom = self.s_r + 1.0 / self.tau;
        let mean_vec = (w + DVector::from_element(self.p, self.mu0 / self.tau)) / denom;
        let z = DMatrix::from_fn(self.p1, self.p2, |_, _| StandardNormal.sample(rng));
        let noise = &self.l1 * z * self.l2.transpose();
        let scale = denom.sqrt();
        self.mu = DVector::from_fn(self.p, |i, _| {
            mean_vec[i] + noise[(i % self.p1, i / self.p1)] / scale
        });
    }

    fn update_mu0<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let kappa = self.kinv.sum();
        let prec = 1.0 / (self.hyper.tau0 * self.hyper.tau0) + kappa / self.tau;
        let mean_val = (&self.kinv * &self.mu).sum() / self.tau / prec;
        let z: f64 = StandardNormal.sample(rng);
        self.mu0 = mean_val + z / prec.sqrt();
    }

    fn update_tau<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let diff = &self.mu - DVector::from_element(self.p, self.mu0);
        let q_form = diff.dot(&(&self.kinv * &diff));
        self.tau = draw_tau(self.hyper.a_tau, self.hyper.b_tau, q_form, self.p, rng);
    }

    /// Random-walk Metropolis step on `log rho`, adapted during burn-in.
    fn update_rho<R: Rng + ?Sized>(&mut self, iter: usize, rng: &mut R) {
        // The field term depends on rho only through R, so the city-pair
        // quadratic forms can be computed once per step.
        let xs: Vec<DVector<f64>> = (0..self.n).map(|c| &self.theta_star[c] - &self.mu).collect();
        let ys: Vec<DVector<f64>> = xs.iter().map(|x| &self.kinv * x).collect();
        let mut h = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i..self.n {
                let v = xs[i].dot(&ys[j]);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        let tr_cur = self.rinv.component_mul(&h).sum();
        let cur = log_rho_target(self.p, self.logdet_r, tr_cur, self.log_rho, self.hyper);
        let z: f64 = StandardNormal.sample(rng);
        let proposal = self.log_rho + self.step_sd * z;
        let rho_new = proposal.exp();
        let r_new = DMatrix::from_fn(self.n, self.n, |i, j| {
            (-self.distances[(i, j)] / rho_new).exp()
        });
        // A proposal that drives R to singularity is simply rejected.
        let mut log_alpha = f64::NEG_INFINITY;
        let mut pieces = None;
        if let Some(chol) = Cholesky::new(r_new) {
            let l = chol.l();
            let logdet = (0..self.n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            let rinv_new = chol.inverse();
            let tr_new = rinv_new.component_mul(&h).sum();
            let cand = log_rho_target(self.p, logdet, tr_new, proposal, self.hyper);
            log_alpha = cand - cur;
            pieces = Some((rinv_new, logdet));
        }
        let accepted = log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha;
        if accepted {
            let (rinv_new, logdet) = pieces.expect("accepted proposal has valid pieces");
            self.log_rho = proposal;
            self.rinv = rinv_new;
            self.logdet_r = logdet;
            self.s_r = self.rinv.sum();
        }
        if iter < self.config.burn_in {
            let alpha = log_alpha.min(0.0).exp();
            let gain = ((iter + 1) as f64).powf(-0.6);
            self.step_sd *= (gain * (alpha - 0.3)).exp();
        } else {
            self.updates_post += 1;
            self.accept_post += u64::from(accepted);
        }
    }

    /// One-at-a-time inverse-Wishart updates of the two scale directions.
    fn update_scales<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), HierError> {
        let m2 = self.m1_to_m2();
        let v_mats: Vec<DMatrix<f64>> = (0..self.n)
            .map(|c| {
                let d = &self.theta_star[c] - &self.mu;
                DMatrix::from_column_slice(self.p1, self.p2, d.as_slice())
            })
            .collect();
        let u_mats: Vec<DMatrix<f64>> = (0..self.n)
            .map(|c| {
                let mut u = DMatrix::zeros(self.p1, self.p2);
                for cp in 0..self.n {
                    let coef = self.rinv[(c, cp)];
                    if coef != 0.0 {
                        u += &v_mats[cp] * coef;
                    }
                }
                u
            })
            .collect();
        let m_diff = &self.mu - DVector::from_element(self.p, self.mu0);
        let m_tilde = DMatrix::from_column_slice(self.p1, self.p2, m_diff.as_slice());
        // Ozone direction.
        let mut g1 = DMatrix::zeros(self.p1, self.p1);
        for c in 0..self.n {
            g1 += &u_mats[c] * &self.s2_inv * v_mats[c].transpose();
        }
        g1 += &m_tilde * &self.s2_inv * m_tilde.transpose() / self.tau;
        let scale1 = DMatrix::identity(self.p1, self.p1) + symmetrized(&g1);
        let df1 = (self.m1 + 2 + (self.n + 1) * self.p2) as f64;
        self.s1 = safe_inv_wishart(df1, &scale1, rng, &mut self.jitter)?;
        let s1_inv_new = chol_inverse(&self.s1)?;
        // Temperature direction, conditioned on the fresh ozone scale.
        let mut g2 = DMatrix::zeros(self.p2, self.p2);
        for c in 0..self.n {
            g2 += u_mats[c].transpose() * &s1_inv_new * &v_mats[c];
        }
        g2 += m_tilde.transpose() * &s1_inv_new * &m_tilde / self.tau;
        let scale2 = DMatrix::identity(self.p2, self.p2) + symmetrized(&g2);
        let df2 = (m2 + 2 + (self.n + 1) * self.p1) as f64;
        self.s2 = safe_inv_wishart(df2, &scale2, rng, &mut self.jitter)?;
        Ok(())
    }
}

/// Run the second-stage chain over the pooled city fits.
pub fn run_chain(
    stage1: &Stage1Output,
    hyper: &Hyperpriors,
    config: &ChainConfig,
) -> Result<PosteriorSample, HierError> {
    hyper.validate()?;
    config.validate()?;
    let fits = &stage1.fits;
    if fits.is_empty() {
        return Err(HierError::NoFits);
    }
    let n = fits.len();
    let m1 = stage1.global.m1;
    let m2 = stage1.global.m2;
    let p1 = m1 + 1;
    let p2 = m2 + 1;
    let p = p1 * p2;
    let t_inv = transform_inverse(m1, m2);

    let mut cities = Vec::with_capacity(n);
    let mut theta_star = Vec::with_capacity(n);
    for fit in fits {
        let a = projection_matrix(fit, &stage1.global, &t_inv)?;
        let v11 = prepare_v11(&fit.v.v11, config.repair_v11, &fit.meta.city_id)?;
        let chol = Cholesky::new(v11).ok_or_else(|| HierError::NonPdCovariance {
            city_id: fit.meta.city_id.clone(),
        })?;
        let v11_inv = chol.inverse();
        let lambda = symmetrized(&(a.transpose() * &v11_inv * &a));
        let m_like = a.transpose() * (&v11_inv * &fit.beta_hat);
        // Start each city at the minimum-norm least-squares preimage of its
        // own estimate, clipped into the cone when the link is monotone.
        let svd = a.clone().svd(true, true);
        let mut init = svd
            .solve(&fit.beta_hat, 1e-10)
            .map_err(|_| HierError::RankDeficient {
                city_id: fit.meta.city_id.clone(),
            })?;
        if config.monotone {
            truncate_theta_inplace(init.as_mut_slice(), m1, m2);
        }
        theta_star.push(init);
        cities.push(CityWork { lambda, m_like });
    }

    let metas: Vec<CityMeta> = fits.iter().map(|f| f.meta.clone()).collect();
    let distances = if config.spatial {
        distance_matrix(&metas)
    } else {
        DMatrix::zeros(n, n)
    };

    let mut sampler = Sampler {
        cities,
        hyper,
        config,
        distances,
        m1,
        p1,
        p2,
        p,
        n,
        theta_star,
        mu: DVector::zeros(p),
        mu0: 0.0,
        // The inverse-gamma prior on tau has no mean for small shapes, so
        // the chain starts from a fixed stand-in of 1.
        tau: 1.0,
        s1: DMatrix::identity(p1, p1),
        s2: DMatrix::identity(p2, p2),
        log_rho: hyper.mu_rho,
        s1_inv: DMatrix::identity(p1, p1),
        s2_inv: DMatrix::identity(p2, p2),
        l1: DMatrix::identity(p1, p1),
        l2: DMatrix::identity(p2, p2),
        kinv: DMatrix::identity(p, p),
        rinv: DMatrix::identity(n, n),
        logdet_r: 0.0,
        s_r: n as f64,
        step_sd: config.initial_step_sd,
        underflow: 0,
        jitter: 0,
        accept_post: 0,
        updates_post: 0,
    };
    sampler.refresh_spatial()?;

    let mut rng = derive_rng(config.seed, "stage2-chain");
    let retained = (config.iterations - config.burn_in) / config.thin;
    let mut draws = Vec::with_capacity(retained);
    for iter in 0..config.iterations {
        sampler.refresh_scales()?;
        sampler.sweep_theta(&mut rng);
        sampler.update_mu(&mut rng);
        sampler.update_mu0(&mut rng);
        sampler.update_tau(&mut rng);
        if config.spatial {
            sampler.update_rho(iter, &mut rng);
        }
        sampler.update_scales(&mut rng)?;
        if iter >= config.burn_in && (iter - config.burn_in + 1) % config.thin == 0 {
            draws.push(HierDraw {
                theta_star: sampler.theta_star.clone(),
                mu: sampler.mu.clone(),
                mu0: sampler.mu0,
                tau: sampler.tau,
                rho: sampler.log_rho.exp(),
                s1: sampler.s1.clone(),
                s2: sampler.s2.clone(),
            });
        }
    }

    let acceptance_rho = if sampler.updates_post > 0 {
        sampler.accept_post as f64 / sampler.updates_post as f64
    } else {
        1.0
    };
    Ok(PosteriorSample {
        city_ids: metas.iter().map(|m| m.city_id.clone()).collect(),
        m1,
        m2,
        monotone: config.monotone,
        spatial: config.spatial,
        draws,
        iterations: config.iterations,
        burn_in: config.burn_in,
        thin: config.thin,
        seed: config.seed,
        acceptance_rho,
        underflow_skips: sampler.underflow,
        jitter_redraws: sampler.jitter,
    })
}
