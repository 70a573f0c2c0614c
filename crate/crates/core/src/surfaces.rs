//! Post-fit inference on posterior surface draws: log relative-rate grids,
//! interaction grids, precision-weighted pooling across cities, stratified
//! temperature comparisons on a common ozone range, and excess-mortality
//! summaries.
//!
//! Every summary is a deterministic function of the retained draws. Grid
//! values are reported only where the data support them: a grid point is
//! supported when enough observed days fall inside a box around it, which
//! keeps the unidentified corners of the covariate rectangle out of the
//! output (ozone and temperature are correlated, so the observed support is
//! a diagonal band, not the full rectangle).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, BernsteinBasis1D, MonotoneCoeffs};
use crate::hier::PosteriorSample;
use crate::math::{mean, quantile_sorted, sample_sd, MathError};
use crate::stage1::GlobalBases;

/// Minimum observed days inside the support box for a grid point to count
/// as inside the data range.
pub const SUPPORT_MIN_DAYS: usize = 5;
/// The support box half-width is the grid extent divided by this.
pub const SUPPORT_BOX_DIVISOR: f64 = 8.0;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("city {city_id}: {window} temperature window holds no days")]
    EmptyWindow {
        city_id: String,
        window: &'static str,
    },
    #[error(
        "city {city_id}: every retained draw has a flat ozone slope in the \
         moderate-temperature window, so the stratified ratio is undefined"
    )]
    FlatSlope { city_id: String },
    #[error("no draws or no cities to summarize")]
    Empty,
    #[error("inputs do not line up: {0}")]
    Mismatch(String),
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("{path}: {message}")]
    Serialization { path: String, message: String },
}

/// Evaluation grid, one vector per axis, in native units.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridAxes {
    pub ozone: Vec<f64>,
    pub temp: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, SurfaceError> {
    if n < 2 || !(hi > lo) {
        return Err(SurfaceError::BadGrid(format!(
            "need at least 2 points over a positive span, got n={n} over [{lo}, {hi}]"
        )));
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect())
}

/// Observed (min, max) per axis of a set of (ozone, temperature) points.
pub fn point_ranges(points: &[[f64; 2]]) -> Result<((f64, f64), (f64, f64)), SurfaceError> {
    if points.is_empty() {
        return Err(SurfaceError::Empty);
    }
    let fold = |axis: usize| {
        points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[axis]), hi.max(p[axis]))
        })
    };
    Ok((fold(0), fold(1)))
}

impl GridAxes {
    pub fn over_ranges(
        ozone: (f64, f64),
        temp: (f64, f64),
        n: usize,
    ) -> Result<GridAxes, SurfaceError> {
        Ok(GridAxes {
            ozone: linspace(ozone.0, ozone.1, n)?,
            temp: linspace(temp.0, temp.1, n)?,
        })
    }

    /// Grid over the observed rectangle of a city's day points.
    pub fn over_points(points: &[[f64; 2]], n: usize) -> Result<GridAxes, SurfaceError> {
        let (oz, temp) = point_ranges(points)?;
        GridAxes::over_ranges(oz, temp, n)
    }
}

/// True where enough observed days land inside the box around the grid point
/// (half-width = axis extent / `SUPPORT_BOX_DIVISOR`). The required count is
/// `SUPPORT_MIN_DAYS` or 0.5% of the record, whichever is larger, so long
/// records do not mark a box supported on a handful of extreme-tail days.
pub fn support_mask(axes: &GridAxes, points: &[[f64; 2]]) -> DMatrix<bool> {
    let o_half = (axes.ozone.last().unwrap() - axes.ozone[0]) / SUPPORT_BOX_DIVISOR;
    let t_half = (axes.temp.last().unwrap() - axes.temp[0]) / SUPPORT_BOX_DIVISOR;
    let needed = SUPPORT_MIN_DAYS.max(points.len() / 200);
    DMatrix::from_fn(axes.ozone.len(), axes.temp.len(), |i, j| {
        let (go, gt) = (axes.ozone[i], axes.temp[j]);
        points
            .iter()
            .filter(|p| (p[0] - go).abs() <= o_half && (p[1] - gt).abs() <= t_half)
            .count()
            >= needed
    })
}

/// Which functional of the fitted log-rate surface a grid reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    /// d(log rate)/d(ozone), scaled to percent change per 10 ppb.
    LogRelativeRate,
    /// d2(log rate)/d(ozone)d(temperature), scaled by the same 1000.
    Interaction,
}

/// Output scaling: derivatives are reported as 100 x (per 10 ppb) = 1000 x
/// the native per-ppb derivative; the interaction uses the same multiplier.
const REPORT_SCALE: f64 = 1000.0;

/// Sample standard deviation, with fewer than two draws treated as spread
/// zero instead of an undefined estimate.
fn spread(values: &[f64]) -> f64 {
    if values.len() < 2 {
        0.0
    } else {
        sample_sd(values)
    }
}

/// Basis values row per grid coordinate.
fn value_matrix(basis: &BernsteinBasis1D, xs: &[f64]) -> Result<DMatrix<f64>, SurfaceError> {
    let p = basis.order + 1;
    let mut m = DMatrix::zeros(xs.len(), p);
    for (r, &x) in xs.iter().enumerate() {
        let row = basis.eval(x)?;
        for (c, v) in row.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    Ok(m)
}

/// Native-unit derivative rows: d b_j(x) / dx on the order-(M-1) expansion.
fn deriv_matrix(basis: &BernsteinBasis1D, xs: &[f64]) -> Result<DMatrix<f64>, SurfaceError> {
    let m = basis.order;
    let p = m + 1;
    let mut out = DMatrix::zeros(xs.len(), p);
    if m == 0 {
        return Ok(out);
    }
    let lower = BernsteinBasis1D::new(&basis.var, m - 1, basis.lo, basis.range)?;
    let scale = m as f64 / basis.range;
    for (r, &x) in xs.iter().enumerate() {
        let low = lower.eval(x)?;
        for j in 0..p {
            let left = if j > 0 { low[j - 1] } else { 0.0 };
            let right = if j < m { low[j] } else { 0.0 };
            out[(r, j)] = scale * (left - right);
        }
    }
    Ok(out)
}

/// Per-draw grid values for one city, plus the support mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSurfaces {
    pub axes: GridAxes,
    /// One ozone-by-temperature matrix per retained draw.
    pub values: Vec<DMatrix<f64>>,
    pub support: DMatrix<bool>,
}

fn psi_matrix(sample: &PosteriorSample, draw: usize, city: usize) -> DMatrix<f64> {
    let theta = sample.theta(draw, city);
    let coeffs = MonotoneCoeffs {
        m1: sample.m1,
        m2: sample.m2,
        theta: theta.iter().copied().collect(),
    }
    .to_psi();
    DMatrix::from_column_slice(sample.m1 + 1, sample.m2 + 1, &coeffs)
}

/// Evaluate the chosen functional on the grid for every retained draw.
pub fn draw_surfaces(
    sample: &PosteriorSample,
    global: &GlobalBases,
    city: usize,
    axes: &GridAxes,
    points: &[[f64; 2]],
    kind: SurfaceKind,
) -> Result<DrawSurfaces, SurfaceError> {
    if sample.n_draws() == 0 {
        return Err(SurfaceError::Empty);
    }
    let ozone_basis = global.ozone_basis();
    let temp_basis = global.temp_basis();
    let b1 = deriv_matrix(&ozone_basis, &axes.ozone)?;
    let b2 = match kind {
        SurfaceKind::LogRelativeRate => value_matrix(&temp_basis, &axes.temp)?,
        SurfaceKind::Interaction => deriv_matrix(&temp_basis, &axes.temp)?,
    };
    let support = support_mask(axes, points);
    let values = (0..sample.n_draws())
        .map(|d| &b1 * psi_matrix(sample, d, city) * b2.transpose() * REPORT_SCALE)
        .collect();
    Ok(DrawSurfaces {
        axes: axes.clone(),
        values,
        support,
    })
}

/// Pointwise posterior summaries of a surface functional on a grid.
/// Summary entries are NaN wherever the support mask is false.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurfaceGrid {
    pub ozone: Vec<f64>,
    pub temp: Vec<f64>,
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
    pub q_lo: DMatrix<f64>,
    pub q_hi: DMatrix<f64>,
    pub pr_gt0: DMatrix<f64>,
    pub support: DMatrix<bool>,
}

/// Collapse per-draw grids to pointwise mean, sd, central 95% interval, and
/// exceedance probability.
pub fn summarize_draws(draws: &DrawSurfaces) -> Result<SurfaceGrid, SurfaceError> {
    let n = draws.values.len();
    if n == 0 {
        return Err(SurfaceError::Empty);
    }
    let (n1, n2) = (draws.axes.ozone.len(), draws.axes.temp.len());
    let mut g = SurfaceGrid {
        ozone: draws.axes.ozone.clone(),
        temp: draws.axes.temp.clone(),
        mean: DMatrix::from_element(n1, n2, f64::NAN),
        sd: DMatrix::from_element(n1, n2, f64::NAN),
        q_lo: DMatrix::from_element(n1, n2, f64::NAN),
        q_hi: DMatrix::from_element(n1, n2, f64::NAN),
        pr_gt0: DMatrix::from_element(n1, n2, f64::NAN),
        support: draws.support.clone(),
    };
    let mut chain = vec![0.0; n];
    for i in 0..n1 {
        for j in 0..n2 {
            if !draws.support[(i, j)] {
                continue;
            }
            for (d, v) in draws.values.iter().enumerate() {
                chain[d] = v[(i, j)];
            }
            g.mean[(i, j)] = mean(&chain);
            g.sd[(i, j)] = spread(&chain);
            g.pr_gt0[(i, j)] =
                chain.iter().filter(|v| **v > 0.0).count() as f64 / n as f64;
            let mut sorted = chain.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite surface values"));
            g.q_lo[(i, j)] = quantile_sorted(&sorted, 0.025)?;
            g.q_hi[(i, j)] = quantile_sorted(&sorted, 0.975)?;
        }
    }
    Ok(g)
}

/// Percent change in mortality per 10 ppb of ozone across the grid.
pub fn log_rr_surface(
    sample: &PosteriorSample,
    global: &GlobalBases,
    city: usize,
    axes: &GridAxes,
    points: &[[f64; 2]],
) -> Result<SurfaceGrid, SurfaceError> {
    summarize_draws(&draw_surfaces(
        sample,
        global,
        city,
        axes,
        points,
        SurfaceKind::LogRelativeRate,
    )?)
}

/// Ozone-temperature interaction (mixed partial) across the grid.
pub fn interaction_surface(
    sample: &PosteriorSample,
    global: &GlobalBases,
    city: usize,
    axes: &GridAxes,
    points: &[[f64; 2]],
) -> Result<SurfaceGrid, SurfaceError> {
    summarize_draws(&draw_surfaces(
        sample,
        global,
        city,
        axes,
        points,
        SurfaceKind::Interaction,
    )?)
}

/// Precision-weighted draw-level pooling across cities on a shared grid.
/// At each supported point, city weights are proportional to the inverse of
/// the city's posterior variance there, renormalized over the cities whose
/// support covers the point; cities share one chain, so combining the same
/// draw across cities is exact.
pub fn pooled_surface(per_city: &[&DrawSurfaces]) -> Result<DrawSurfaces, SurfaceError> {
    let first = *per_city.first().ok_or(SurfaceError::Empty)?;
    let n_draws = first.values.len();
    for d in per_city {
        if d.axes != first.axes {
            return Err(SurfaceError::Mismatch("grids differ across cities".into()));
        }
        if d.values.len() != n_draws {
            return Err(SurfaceError::Mismatch(
                "draw counts differ across cities".into(),
            ));
        }
    }
    let (n1, n2) = (first.axes.ozone.len(), first.axes.temp.len());
    let mut support = DMatrix::from_element(n1, n2, false);
    let mut values = vec![DMatrix::from_element(n1, n2, f64::NAN); n_draws];
    let mut chain = vec![0.0; n_draws];
    for i in 0..n1 {
        for j in 0..n2 {
            let holders: Vec<usize> = (0..per_city.len())
                .filter(|c| per_city[*c].support[(i, j)])
                .collect();
            if holders.is_empty() {
                continue;
            }
            support[(i, j)] = true;
            // Inverse-variance weights. A city whose draws are identical at
            // this point (the shape constraint can pin a data-starved corner
            // to an exactly flat posterior) must not take infinite weight, so
            // each variance is floored at 1% of the widest holder's.
            let sds: Vec<f64> = holders
                .iter()
                .map(|&c| {
                    for (d, v) in per_city[c].values.iter().enumerate() {
                        chain[d] = v[(i, j)];
                    }
                    spread(&chain)
                })
                .collect();
            let max_sd = sds.iter().fold(0.0f64, |m, s| m.max(*s));
            let var_floor = (0.1 * max_sd).powi(2);
            let mut weights: Vec<f64> = sds
                .iter()
                .map(|sd| 1.0 / (sd * sd).max(var_floor).max(1e-300))
                .collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            for d in 0..n_draws {
                let mut acc = 0.0;
                for (h, &c) in holders.iter().enumerate() {
                    acc += weights[h] * per_city[c].values[d][(i, j)];
                }
                values[d][(i, j)] = acc;
            }
        }
    }
    Ok(DrawSurfaces {
        axes: first.axes.clone(),
        values,
        support,
    })
}

/// Pool every city and summarize: the national (or regional, for a subset)
/// surface on a common grid.
pub fn national_surface(per_city: &[&DrawSurfaces]) -> Result<SurfaceGrid, SurfaceError> {
    summarize_draws(&pooled_surface(per_city)?)
}

/// Posterior summary of a scalar quantity's draw vector.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    pub q_lo: f64,
    pub q_hi: f64,
}

pub fn summarize_scalar(draws: &[f64]) -> Result<ScalarSummary, SurfaceError> {
    if draws.is_empty() {
        return Err(SurfaceError::Empty);
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite summary values"));
    Ok(ScalarSummary {
        mean: mean(draws),
        sd: spread(draws),
        q_lo: quantile_sorted(&sorted, 0.025)?,
        q_hi: quantile_sorted(&sorted, 0.975)?,
    })
}

/// Precision-weighted draw-level pooling of per-city scalar draw vectors.
pub fn pooled_scalar_draws(per_city: &[Vec<f64>]) -> Result<Vec<f64>, SurfaceError> {
    let n_draws = per_city.first().ok_or(SurfaceError::Empty)?.len();
    if n_draws == 0 {
        return Err(SurfaceError::Empty);
    }
    if per_city.iter().any(|c| c.len() != n_draws) {
        return Err(SurfaceError::Mismatch(
            "draw counts differ across cities".into(),
        ));
    }
    // Same degenerate-variance guard as the surface pooling: a city whose
    // draws are all identical is pinned, not infinitely informative.
    let sds: Vec<f64> = per_city.iter().map(|c| spread(c)).collect();
    let max_sd = sds.iter().fold(0.0f64, |m, s| m.max(*s));
    let var_floor = (0.1 * max_sd).powi(2);
    let mut weights: Vec<f64> = sds
        .iter()
        .map(|sd| 1.0 / (sd * sd).max(var_floor).max(1e-300))
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok((0..n_draws)
        .map(|d| {
            per_city
                .iter()
                .zip(&weights)
                .map(|(c, w)| w * c[d])
                .sum()
        })
        .collect())
}

/// Posterior ratio summary for the stratified comparison. The monotone cone
/// puts positive mass on exactly flat slopes, where a ratio of window means
/// is 0/0; those draws carry no information about the ratio, so summaries
/// condition on the draws where the denominator is measurable and `defined`
/// records that fraction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RatioSummary {
    pub mean: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub pr_gt1: f64,
    /// Fraction of retained draws on which the ratio is defined.
    pub defined: f64,
}

/// Denominators below this (in report units, percent per 10 ppb) count as
/// flat: far below any measurable effect, far above float noise from the
/// telescoped derivative rows.
const RATIO_DENOMINATOR_FLOOR: f64 = 1e-8;

fn summarize_ratio(ratios: &[f64], total_draws: usize) -> Result<RatioSummary, SurfaceError> {
    if ratios.is_empty() || total_draws == 0 {
        return Err(SurfaceError::Empty);
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratio values"));
    Ok(RatioSummary {
        mean: mean(ratios),
        q_lo: quantile_sorted(&sorted, 0.025)?,
        q_hi: quantile_sorted(&sorted, 0.975)?,
        pr_gt1: ratios.iter().filter(|v| **v > 1.0).count() as f64 / ratios.len() as f64,
        defined: ratios.len() as f64 / total_draws as f64,
    })
}

/// High- versus moderate-temperature comparison of the ozone effect for one
/// city, on the observed ozone values and on the common ozone range.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StratifiedComparison {
    pub city_id: String,
    /// Temperature window between the 95th and 99th percentiles.
    pub high_temp_window: (f64, f64),
    /// Temperature window between the 50th and 75th percentiles.
    pub moderate_temp_window: (f64, f64),
    /// Trimmed (10th-90th percentile) ozone range within each window.
    pub high_ozone_range: (f64, f64),
    pub moderate_ozone_range: (f64, f64),
    /// Intersection of the two trimmed ranges; None when they do not meet.
    pub common_ozone_range: Option<(f64, f64)>,
    pub n_high_days: usize,
    pub n_moderate_days: usize,
    /// Ratio of window-mean ozone effects on each window's own ozone values.
    pub ratio_observed: RatioSummary,
    /// Same ratio with both windows restricted to the common ozone range;
    /// None when that range is empty (a city can lack overlap) or when no
    /// draw defines the restricted ratio.
    pub ratio_common: Option<RatioSummary>,
}

/// Tensor derivative rows (ozone direction) at arbitrary day points in the
/// pooled-basis coefficient layout, scaled to report units.
fn log_rr_rows(
    global: &GlobalBases,
    points: &[[f64; 2]],
) -> Result<DMatrix<f64>, SurfaceError> {
    let ozone_basis = global.ozone_basis();
    let temp_basis = global.temp_basis();
    let p1 = ozone_basis.order + 1;
    let p2 = temp_basis.order + 1;
    let oz: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let tm: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let d1 = deriv_matrix(&ozone_basis, &oz)?;
    let b2 = value_matrix(&temp_basis, &tm)?;
    let mut rows = DMatrix::zeros(points.len(), p1 * p2);
    for r in 0..points.len() {
        for k in 0..p2 {
            for j in 0..p1 {
                rows[(r, k * p1 + j)] = d1[(r, j)] * b2[(r, k)] * REPORT_SCALE;
            }
        }
    }
    Ok(rows)
}

/// Value tensor row at one day point.
fn surface_row(global: &GlobalBases, point: [f64; 2]) -> Result<DVector<f64>, SurfaceError> {
    let b1 = global.ozone_basis().eval(point[0])?;
    let b2 = global.temp_basis().eval(point[1])?;
    let p1 = b1.len();
    let mut row = DVector::zeros(p1 * b2.len());
    for (k, w2) in b2.iter().enumerate() {
        for (j, w1) in b1.iter().enumerate() {
            row[k * p1 + j] = w1 * w2;
        }
    }
    Ok(row)
}

fn psi_vector(sample: &PosteriorSample, draw: usize, city: usize) -> DVector<f64> {
    let theta = sample.theta(draw, city);
    DVector::from_vec(
        MonotoneCoeffs {
            m1: sample.m1,
            m2: sample.m2,
            theta: theta.iter().copied().collect(),
        }
        .to_psi(),
    )
}

fn quantile_of(values: &[f64], p: f64) -> Result<f64, SurfaceError> {
    Ok(crate::math::quantile(values, p)?)
}

/// Stratified high/moderate temperature comparison of the mean ozone effect
/// over a city's observed days.
pub fn stratified_ratio(
    sample: &PosteriorSample,
    global: &GlobalBases,
    city: usize,
    points: &[[f64; 2]],
) -> Result<StratifiedComparison, SurfaceError> {
    let city_id = sample.city_ids[city].clone();
    let temps: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let high_window = (quantile_of(&temps, 0.95)?, quantile_of(&temps, 0.99)?);
    let moderate_window = (quantile_of(&temps, 0.50)?, quantile_of(&temps, 0.75)?);
    let in_window = |w: (f64, f64)| -> Vec<[f64; 2]> {
        points
            .iter()
            .filter(|p| p[1] >= w.0 && p[1] <= w.1)
            .copied()
            .collect()
    };
    let high = in_window(high_window);
    let moderate = in_window(moderate_window);
    if high.is_empty() {
        return Err(SurfaceError::EmptyWindow {
            city_id,
            window: "high",
        });
    }
    if moderate.is_empty() {
        return Err(SurfaceError::EmptyWindow {
            city_id,
            window: "moderate",
        });
    }
    let trim = |days: &[[f64; 2]]| -> Result<(Vec<[f64; 2]>, (f64, f64)), SurfaceError> {
        let oz: Vec<f64> = days.iter().map(|p| p[0]).collect();
        let range = (quantile_of(&oz, 0.10)?, quantile_of(&oz, 0.90)?);
        let kept = days
            .iter()
            .filter(|p| p[0] >= range.0 && p[0] <= range.1)
            .copied()
            .collect();
        Ok((kept, range))
    };
    let (high_days, high_ozone_range) = trim(&high)?;
    let (moderate_days, moderate_ozone_range) = trim(&moderate)?;
    let common_lo = high_ozone_range.0.max(moderate_ozone_range.0);
    let common_hi = high_ozone_range.1.min(moderate_ozone_range.1);
    let restrict = |days: &[[f64; 2]]| -> Vec<[f64; 2]> {
        days.iter()
            .filter(|p| p[0] >= common_lo && p[0] <= common_hi)
            .copied()
            .collect()
    };
    let (high_common, moderate_common) = (restrict(&high_days), restrict(&moderate_days));
    let common_ozone_range = if common_lo <= common_hi
        && !high_common.is_empty()
        && !moderate_common.is_empty()
    {
        Some((common_lo, common_hi))
    } else {
        None
    };

    let mean_rows = |days: &[[f64; 2]]| log_rr_rows(global, days);
    let rows_high = mean_rows(&high_days)?;
    let rows_moderate = mean_rows(&moderate_days)?;
    let rows_common = match common_ozone_range {
        Some(_) => Some((mean_rows(&high_common)?, mean_rows(&moderate_common)?)),
        None => None,
    };
    let n = sample.n_draws();
    let mut observed = Vec::with_capacity(n);
    let mut common = Vec::with_capacity(n);
    for d in 0..n {
        let psi = psi_vector(sample, d, city);
        let window_mean = |rows: &DMatrix<f64>| (rows * &psi).mean();
        let denominator = window_mean(&rows_moderate);
        if denominator.abs() > RATIO_DENOMINATOR_FLOOR {
            observed.push(window_mean(&rows_high) / denominator);
        }
        if let Some((rh, rm)) = &rows_common {
            let denominator = window_mean(rm);
            if denominator.abs() > RATIO_DENOMINATOR_FLOOR {
                common.push(window_mean(rh) / denominator);
            }
        }
    }
    if observed.is_empty() {
        return Err(SurfaceError::FlatSlope { city_id });
    }
    Ok(StratifiedComparison {
        city_id,
        high_temp_window: high_window,
        moderate_temp_window: moderate_window,
        high_ozone_range,
        moderate_ozone_range,
        common_ozone_range,
        n_high_days: high_days.len(),
        n_moderate_days: moderate_days.len(),
        ratio_observed: summarize_ratio(&observed, n)?,
        ratio_common: match common_ozone_range {
            Some(_) if !common.is_empty() => Some(summarize_ratio(&common, n)?),
            _ => None,
        },
    })
}

/// Per-draw percent increase in the rate from the medians of ozone and
/// temperature to their 95th percentiles over the city's observed days.
pub fn excess_draws(
    sample: &PosteriorSample,
    global: &GlobalBases,
    city: usize,
    points: &[[f64; 2]],
) -> Result<Vec<f64>, SurfaceError> {
    let oz: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let tm: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let low = [quantile_of(&oz, 0.50)?, quantile_of(&tm, 0.50)?];
    let high = [quantile_of(&oz, 0.95)?, quantile_of(&tm, 0.95)?];
    let row_high = surface_row(global, high)?;
    let row_low = surface_row(global, low)?;
    Ok((0..sample.n_draws())
        .map(|d| {
            let psi = psi_vector(sample, d, city);
            100.0 * ((row_high.dot(&psi) - row_low.dot(&psi)).exp() - 1.0)
        })
        .collect())
}

/// Summary of `excess_draws` for one city.
pub fn excess_mortality(
    sample: &PosteriorSample,
    global: &GlobalBases,
    city: usize,
    points: &[[f64; 2]],
) -> Result<ScalarSummary, SurfaceError> {
    summarize_scalar(&excess_draws(sample, global, city, points)?)
}

/// Plot-ready long-format CSV: one row per supported grid point.
pub fn write_grid_csv(grid: &SurfaceGrid, path: &Path) -> Result<(), SurfaceError> {
    let to_err = |message: String| SurfaceError::Serialization {
        path: path.display().to_string(),
        message,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
    w.write_record(["ozone", "temp", "mean", "sd", "q2.5", "q97.5", "pr_gt0"])
        .map_err(|e| to_err(e.to_string()))?;
    for i in 0..grid.ozone.len() {
        for j in 0..grid.temp.len() {
            if !grid.support[(i, j)] {
                continue;
            }
            w.write_record([
                grid.ozone[i].to_string(),
                grid.temp[j].to_string(),
                grid.mean[(i, j)].to_string(),
                grid.sd[(i, j)].to_string(),
                grid.q_lo[(i, j)].to_string(),
                grid.q_hi[(i, j)].to_string(),
                grid.pr_gt0[(i, j)].to_string(),
            ])
            .map_err(|e| to_err(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| to_err(e.to_string()))
}

/// One line of the excess-mortality table: per-city, per-region, or
/// national scope.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExcessRow {
    pub scope: String,
    pub name: String,
    pub summary: ScalarSummary,
}

/// Excess-mortality table: one row per city, region, and the national pool.
pub fn write_excess_csv(rows: &[ExcessRow], path: &Path) -> Result<(), SurfaceError> {
    let to_err = |message: String| SurfaceError::Serialization {
        path: path.display().to_string(),
        message,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
    w.write_record(["scope", "name", "mean", "sd", "q2.5", "q97.5"])
        .map_err(|e| to_err(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.scope.clone(),
            r.name.clone(),
            r.summary.mean.to_string(),
            r.summary.sd.to_string(),
            r.summary.q_lo.to_string(),
            r.summary.q_hi.to_string(),
        ])
        .map_err(|e| to_err(e.to_string()))?;
    }
    w.flush().map_err(|e| to_err(e.to_string()))
}

/// Stratified-comparison table, one row per city. Cities without a common
/// ozone range leave the common columns empty.
pub fn write_stratified_csv(
    rows: &[StratifiedComparison],
    path: &Path,
) -> Result<(), SurfaceError> {
    let to_err = |message: String| SurfaceError::Serialization {
        path: path.display().to_string(),
        message,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
    w.write_record([
        "city_id",
        "n_high_days",
        "n_moderate_days",
        "high_temp_lo",
        "high_temp_hi",
        "moderate_temp_lo",
        "moderate_temp_hi",
        "high_ozone_lo",
        "high_ozone_hi",
        "moderate_ozone_lo",
        "moderate_ozone_hi",
        "common_ozone_lo",
        "common_ozone_hi",
        "ratio_observed_mean",
        "ratio_observed_q2.5",
        "ratio_observed_q97.5",
        "ratio_observed_pr_gt1",
        "ratio_observed_defined",
        "ratio_common_mean",
        "ratio_common_q2.5",
        "ratio_common_q97.5",
        "ratio_common_pr_gt1",
        "ratio_common_defined",
    ])
    .map_err(|e| to_err(e.to_string()))?;
    for r in rows {
        let common_range = r
            .common_ozone_range
            .map(|(lo, hi)| (lo.to_string(), hi.to_string()))
            .unwrap_or_default();
        let common = r
            .ratio_common
            .as_ref()
            .map(|c| {
                (
                    c.mean.to_string(),
                    c.q_lo.to_string(),
                    c.q_hi.to_string(),
                    c.pr_gt1.to_string(),
                    c.defined.to_string(),
                )
            })
            .unwrap_or_default();
        w.write_record([
            r.city_id.clone(),
            r.n_high_days.to_string(),
            r.n_moderate_days.to_string(),
            r.high_temp_window.0.to_string(),
            r.high_temp_window.1.to_string(),
            r.moderate_temp_window.0.to_string(),
            r.moderate_temp_window.1.to_string(),
            r.high_ozone_range.0.to_string(),
            r.high_ozone_range.1.to_string(),
            r.moderate_ozone_range.0.to_string(),
            r.moderate_ozone_range.1.to_string(),
            common_range.0,
            common_range.1,
            r.ratio_observed.mean.to_string(),
            r.ratio_observed.q_lo.to_string(),
            r.ratio_observed.q_hi.to_string(),
            r.ratio_observed.pr_gt1.to_string(),
            r.ratio_observed.defined.to_string(),
            common.0,
            common.1,
            common.2,
            common.3,
            common.4,
        ])
        .map_err(|e| to_err(e.to_string()))?;
    }
    w.flush().map_err(|e| to_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{transform_inverse, SurfaceSpec};
    use crate::hier::HierDraw;
    use crate::math::derive_rng;
    use crate::stage1::OrderRule;
    use rand::Rng;
    use tempfile::tempdir;

    fn wide_global(m1: usize, m2: usize) -> GlobalBases {
        GlobalBases {
            ozone_lo: 0.0,
            ozone_hi: 120.0,
            temp_lo: 40.0,
            temp_hi: 100.0,
            m1,
            m2,
            rule: OrderRule::Fixed(m1, m2),
        }
    }

    /// Posterior sample with hand-picked latent draws; hyperparameters are
    /// placeholders since the surface code never reads them.
    fn hand_sample(
        m1: usize,
        m2: usize,
        thetas: Vec<Vec<DVector<f64>>>,
        monotone: bool,
    ) -> PosteriorSample {
        let p = (m1 + 1) * (m2 + 1);
        let n_cities = thetas[0].len();
        PosteriorSample {
            city_ids: (0..n_cities).map(|i| format!("c{i}")).collect(),
            m1,
            m2,
            monotone,
            spatial: false,
            draws: thetas
                .into_iter()
                .map(|theta_star| HierDraw {
                    theta_star,
                    mu: DVector::zeros(p),
                    mu0: 0.0,
                    tau: 1.0,
                    rho: 1.0,
                    s1: DMatrix::identity(m1 + 1, m1 + 1),
                    s2: DMatrix::identity(m2 + 1, m2 + 1),
                })
                .collect(),
            iterations: 0,
            burn_in: 0,
            thin: 1,
            seed: 0,
            acceptance_rho: 1.0,
            underflow_skips: 0,
            jitter_redraws: 0,
        }
    }

    /// Day points on a lattice covering the whole rectangle, dense enough
    /// that every grid point is supported.
    fn dense_points(ozone: (f64, f64), temp: (f64, f64)) -> Vec<[f64; 2]> {
        let mut pts = Vec::new();
        for i in 0..25 {
            for j in 0..25 {
                pts.push([
                    ozone.0 + (ozone.1 - ozone.0) * i as f64 / 24.0,
                    temp.0 + (temp.1 - temp.0) * j as f64 / 24.0,
                ]);
            }
        }
        pts
    }

    fn random_theta(p: usize, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(p, |_, _| rng.random::<f64>() * 0.1 - 0.03)
    }

    #[test]
    fn log_rr_grid_matches_the_per_point_evaluation_loop() {
        let (m1, m2) = (2, 3);
        let p = (m1 + 1) * (m2 + 1);
        let global = wide_global(m1, m2);
        let mut rng = derive_rng(912, "grid-oracle");
        let thetas: Vec<Vec<DVector<f64>>> =
            (0..5).map(|_| vec![random_theta(p, &mut rng)]).collect();
        let sample = hand_sample(m1, m2, thetas, true);
        let points = dense_points((0.0, 120.0), (40.0, 100.0));
        let axes = GridAxes::over_points(&points, 9).unwrap();
        let grid = log_rr_surface(&sample, &global, 0, &axes, &points).unwrap();

        let t_inv = transform_inverse(m1, m2);
        for (i, &x1) in axes.ozone.iter().enumerate() {
            for (j, &x2) in axes.temp.iter().enumerate() {
                assert!(grid.support[(i, j)], "dense lattice supports all points");
                let mut values = Vec::new();
                for d in 0..sample.n_draws() {
                    let psi = &t_inv * sample.theta(d, 0);
                    let spec = SurfaceSpec::new(
                        global.ozone_basis(),
                        global.temp_basis(),
                        psi.iter().copied().collect(),
                    )
                    .unwrap();
                    values.push(1000.0 * spec.eval_dfdx1(x1, x2).unwrap());
                }
                assert!((grid.mean[(i, j)] - mean(&values)).abs() < 1e-9);
                assert!((grid.sd[(i, j)] - sample_sd(&values)).abs() < 1e-9);
                assert!(grid.q_lo[(i, j)] <= grid.q_hi[(i, j)]);
                assert!(grid.sd[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn identical_draws_have_zero_spread() {
        let (m1, m2) = (2, 2);
        let p = 9;
        let mut rng = derive_rng(912, "no-spread");
        let theta = random_theta(p, &mut rng);
        let sample = hand_sample(m1, m2, vec![vec![theta.clone()]; 4], true);
        let global = wide_global(m1, m2);
        let points = dense_points((0.0, 120.0), (40.0, 100.0));
        let axes = GridAxes::over_points(&points, 7).unwrap();
        let grid = log_rr_surface(&sample, &global, 0, &axes, &points).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(grid.sd[(i, j)], 0.0);
                assert_eq!(grid.q_lo[(i, j)], grid.mean[(i, j)]);
                assert_eq!(grid.q_hi[(i, j)], grid.mean[(i, j)]);
            }
        }
    }

    #[test]
    fn monotone_draws_have_nonnegative_ozone_effect_everywhere() {
        let (m1, m2) = (3, 2);
        let p = 12;
        let global = wide_global(m1, m2);
        let mut rng = derive_rng(912, "cone-grid");
        let thetas: Vec<Vec<DVector<f64>>> = (0..20)
            .map(|_| vec![DVector::from_fn(p, |_, _| rng.random::<f64>() * 2.0 - 1.0)])
            .collect();
        let sample = hand_sample(m1, m2, thetas, true);
        let points = dense_points((0.0, 120.0), (40.0, 100.0));
        let axes = GridAxes::over_points(&points, 13).unwrap();
        let draws = draw_surfaces(
            &sample,
            &global,
            0,
            &axes,
            &points,
            SurfaceKind::LogRelativeRate,
        )
        .unwrap();
        for v in &draws.values {
            assert!(v.min() >= -1e-12, "cone draw dipped to {}", v.min());
        }
        let grid = summarize_draws(&draws).unwrap();
        for i in 0..13 {
            for j in 0..13 {
                assert!(grid.mean[(i, j)] >= -1e-12);
            }
        }
    }

    #[test]
    fn interaction_grid_matches_nested_finite_differences() {
        let (m1, m2) = (3, 3);
        let p = 16;
        let global = wide_global(m1, m2);
        let mut rng = derive_rng(912, "fd-oracle");
        let theta = random_theta(p, &mut rng);
        let sample = hand_sample(m1, m2, vec![vec![theta]], true);
        let points = dense_points((0.0, 120.0), (40.0, 100.0));
        let axes = GridAxes::over_ranges((20.0, 100.0), (50.0, 90.0), 6).unwrap();
        let grid = interaction_surface(&sample, &global, 0, &axes, &points).unwrap();

        let t_inv = transform_inverse(m1, m2);
        let psi = &t_inv * sample.theta(0, 0);
        let spec = SurfaceSpec::new(
            global.ozone_basis(),
            global.temp_basis(),
            psi.iter().copied().collect(),
        )
        .unwrap();
        let (h1, h2) = (0.05, 0.03);
        for (i, &x1) in axes.ozone.iter().enumerate() {
            for (j, &x2) in axes.temp.iter().enumerate() {
                let f = |a: f64, b: f64| spec.eval_surface(a, b).unwrap();
                let fd = (f(x1 + h1, x2 + h2) - f(x1 + h1, x2 - h2) - f(x1 - h1, x2 + h2)
                    + f(x1 - h1, x2 - h2))
                    / (4.0 * h1 * h2);
                let got = grid.mean[(i, j)] / 1000.0;
                assert!(
                    (got - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "cross derivative {got} vs finite difference {fd} at ({x1}, {x2})"
                );
            }
        }
    }

    #[test]
    fn additive_coefficients_have_identically_zero_interaction() {
        let (m1, m2) = (3, 4);
        let p1 = m1 + 1;
        let p2 = m2 + 1;
        // psi_{jk} = a_j + b_k has no cross term; theta is its difference
        // transform along the ozone index.
        let a = [0.0, 0.1, 0.15, 0.4];
        let b = [0.0, -0.2, 0.3, 0.1, 0.05];
        let mut psi = vec![0.0; p1 * p2];
        for k in 0..p2 {
            for j in 0..p1 {
                psi[k * p1 + j] = a[j] + b[k];
            }
        }
        let theta = crate::basis::MonotoneCoeffs::from_psi(m1, m2, &psi).theta;
        let sample = hand_sample(m1, m2, vec![vec![DVector::from_vec(theta)]], false);
        let global = wide_global(m1, m2);
        let points = dense_points((0.0, 120.0), (40.0, 100.0));
        let axes = GridAxes::over_points(&points, 11).unwrap();
        let grid = interaction_surface(&sample, &global, 0, &axes, &points).unwrap();
        for i in 0..11 {
            for j in 0..11 {
                assert!(grid.mean[(i, j)].abs() < 1e-10);
            }
        }
    }

    /// Hand-made draw grids with exactly proportional variances.
    fn pooling_fixture() -> (DrawSurfaces, DrawSurfaces) {
        let axes = GridAxes {
            ozone: vec![10.0, 20.0, 30.0],
            temp: vec![60.0, 70.0],
        };
        let support = DMatrix::from_element(3, 2, true);
        let e = [-1.0, 1.0, -1.0, 1.0];
        let (mu_a, mu_b) = (2.0, 6.0);
        let a = DrawSurfaces {
            axes: axes.clone(),
            values: e
                .iter()
                .map(|e| DMatrix::from_element(3, 2, mu_a + e))
                .collect(),
            support: support.clone(),
        };
        let b = DrawSurfaces {
            axes,
            values: e
                .iter()
                .map(|e| DMatrix::from_element(3, 2, mu_b + 3.0 * e))
                .collect(),
            support,
        };
        (a, b)
    }

    #[test]
    fn pooling_weights_follow_inverse_variance() {
        let (a, b) = pooling_fixture();
        // Variances are 1:9, so the weights must be 0.9 and 0.1 and the
        // pooled mean 0.9 mu_a + 0.1 mu_b at every point.
        let national = national_surface(&[&a, &b]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((national.mean[(i, j)] - (0.9 * 2.0 + 0.1 * 6.0)).abs() < 1e-12);
            }
        }
        // A single city pools to itself, draw for draw.
        let solo = pooled_surface(&[&a]).unwrap();
        for d in 0..4 {
            assert_eq!(solo.values[d], a.values[d]);
        }
        // Equal variances pool to the straight average.
        let b_equal = DrawSurfaces {
            axes: a.axes.clone(),
            values: a
                .values
                .iter()
                .map(|v| v.map(|x| x + 4.0))
                .collect(),
            support: a.support.clone(),
        };
        let avg = pooled_surface(&[&a, &b_equal]).unwrap();
        for d in 0..4 {
            let want = (&a.values[d] + &b_equal.values[d]) * 0.5;
            assert!((&avg.values[d] - want).abs().max() < 1e-12);
        }
    }

    #[test]
    fn pooling_respects_support_masks() {
        let (a, mut b) = pooling_fixture();
        b.support[(0, 0)] = false;
        let mut a2 = a.clone();
        a2.support[(2, 1)] = false;
        b.support[(2, 1)] = false;
        let pooled = pooled_surface(&[&a2, &b]).unwrap();
        // Where only one city has support, the pool is that city alone.
        for d in 0..4 {
            assert_eq!(pooled.values[d][(0, 0)], a2.values[d][(0, 0)]);
        }
        // Where no city has support, the point is masked.
        assert!(!pooled.support[(2, 1)]);
        assert!(pooled.support[(0, 0)]);
    }

    #[test]
    fn constant_slope_surface_gives_unit_stratified_ratio() {
        // Linear in ozone and flat in temperature: the ozone effect is the
        // same constant everywhere, so any window ratio is exactly 1.
        let (m1, m2) = (1, 1);
        let theta = DVector::from_vec(vec![0.0, 0.3, 0.0, 0.3]);
        let sample = hand_sample(m1, m2, vec![vec![theta.clone()], vec![theta]], true);
        let global = wide_global(m1, m2);
        let mut rng = derive_rng(912, "strat-flat");
        let points: Vec<[f64; 2]> = (0..800)
            .map(|_| {
                [
                    120.0 * rng.random::<f64>(),
                    40.0 + 60.0 * rng.random::<f64>(),
                ]
            })
            .collect();
        let comp = stratified_ratio(&sample, &global, 0, &points).unwrap();
        assert!((comp.ratio_observed.mean - 1.0).abs() < 1e-9);
        let common = comp.ratio_common.expect("overlapping ozone ranges");
        assert!((common.mean - 1.0).abs() < 1e-9);
        assert!(comp.n_high_days > 0 && comp.n_moderate_days > 0);
        let (lo, hi) = comp.common_ozone_range.unwrap();
        assert!(lo >= comp.high_ozone_range.0.min(comp.moderate_ozone_range.0));
        assert!(hi <= comp.high_ozone_range.1.max(comp.moderate_ozone_range.1));
    }

    #[test]
    fn observed_ratio_exceeds_common_ratio_under_correlated_ozone() {
        // Nonlinear-but-additive truth: the ozone effect grows with ozone
        // and ignores temperature. Hot days carry higher ozone, so the
        // observed-range ratio picks up the ozone shift while the common
        // range removes much of it.
        let (m1, m2) = (2, 1);
        // psi over ozone index: quadratic 0, 0, 0.6 per temperature level.
        let psi = vec![0.0, 0.0, 0.6, 0.0, 0.0, 0.6];
        let theta = crate::basis::MonotoneCoeffs::from_psi(m1, m2, &psi).theta;
        let sample = hand_sample(m1, m2, vec![vec![DVector::from_vec(theta)]], true);
        let global = wide_global(m1, m2);
        let mut rng = derive_rng(912, "strat-corr");
        let points: Vec<[f64; 2]> = (0..900)
            .map(|_| {
                let t = 40.0 + 60.0 * rng.random::<f64>();
                let o = (4.0 + 0.9 * (t - 40.0) + 25.0 * (rng.random::<f64>() - 0.5))
                    .clamp(0.0, 120.0);
                [o, t]
            })
            .collect();
        let comp = stratified_ratio(&sample, &global, 0, &points).unwrap();
        let common = comp.ratio_common.expect("ranges overlap");
        assert!(
            comp.ratio_observed.mean >= common.mean - 1e-9,
            "observed {} vs common {}",
            comp.ratio_observed.mean,
            common.mean
        );
        assert!(comp.ratio_observed.mean > 1.0, "hot days see larger effects");
    }

    #[test]
    fn stratified_ratio_ignores_day_order() {
        let (m1, m2) = (2, 2);
        let psi = vec![0.0, 0.1, 0.5, 0.0, 0.2, 0.6, 0.0, 0.25, 0.9];
        let theta = crate::basis::MonotoneCoeffs::from_psi(m1, m2, &psi).theta;
        let sample = hand_sample(m1, m2, vec![vec![DVector::from_vec(theta)]; 3], true);
        let global = wide_global(m1, m2);
        let mut rng = derive_rng(912, "strat-order");
        let mut points: Vec<[f64; 2]> = (0..600)
            .map(|_| {
                [
                    120.0 * rng.random::<f64>(),
                    40.0 + 60.0 * rng.random::<f64>(),
                ]
            })
            .collect();
        let a = stratified_ratio(&sample, &global, 0, &points).unwrap();
        points.reverse();
        points.rotate_left(101);
        let b = stratified_ratio(&sample, &global, 0, &points).unwrap();
        assert!((a.ratio_observed.mean - b.ratio_observed.mean).abs() < 1e-9);
        assert_eq!(a.n_high_days, b.n_high_days);
        assert_eq!(a.common_ozone_range.is_some(), b.common_ozone_range.is_some());
    }

    #[test]
    fn doubled_high_temperature_effect_shows_up_in_the_common_ratio() {
        // Truth: f(o, t) = s u_o (1 + c u_t^9), so the ozone effect at the
        // top of the temperature range is about twice its moderate value
        // once c is calibrated to the window averages of u_t^9.
        let (m1, m2) = (1, 9);
        let (p1, p2) = (m1 + 1, m2 + 1);
        let (s, c) = (0.05, 1.39);
        let mut psi = vec![0.0; p1 * p2];
        for k in 0..p2 {
            for j in 0..p1 {
                let bump = if k == 9 { c } else { 0.0 };
                psi[k * p1 + j] = s * j as f64 / m1 as f64 * (1.0 + bump);
            }
        }
        let base = crate::basis::MonotoneCoeffs::from_psi(m1, m2, &psi).theta;
        let mut rng = derive_rng(912, "strat-double");
        let thetas: Vec<Vec<DVector<f64>>> = (0..40)
            .map(|_| {
                vec![DVector::from_fn(base.len(), |i, _| {
                    base[i] + 0.002 * (rng.random::<f64>() - 0.5)
                })]
            })
            .collect();
        let sample = hand_sample(m1, m2, thetas, true);
        let global = wide_global(m1, m2);
        let points: Vec<[f64; 2]> = (0..1200)
            .map(|_| {
                [
                    120.0 * rng.random::<f64>(),
                    40.0 + 60.0 * rng.random::<f64>(),
                ]
            })
            .collect();
        let comp = stratified_ratio(&sample, &global, 0, &points).unwrap();
        let common = comp.ratio_common.expect("uniform ozone overlaps");
        assert!(
            common.mean > 1.5 && common.mean < 2.5,
            "common-range ratio {} should sit near the built-in doubling",
            common.mean
        );
        assert!(common.pr_gt1 > 0.99);
    }

    #[test]
    fn excess_mortality_handles_flat_and_known_shifts() {
        let (m1, m2) = (1, 1);
        let global = wide_global(m1, m2);
        let points = dense_points((0.0, 120.0), (40.0, 100.0));
        // Flat surface (constant level, zero differences): zero excess.
        let flat = hand_sample(
            m1,
            m2,
            vec![vec![DVector::from_vec(vec![0.2, 0.0, 0.2, 0.0])]],
            false,
        );
        let z = excess_mortality(&flat, &global, 0, &points).unwrap();
        assert!(z.mean.abs() < 1e-10 && z.sd.abs() < 1e-12);

        // Linear-in-ozone surface scaled so the quantile shift is log(1.05).
        let oz: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let (o50, o95) = (
            crate::math::quantile(&oz, 0.5).unwrap(),
            crate::math::quantile(&oz, 0.95).unwrap(),
        );
        let slope = 1.05f64.ln() / ((o95 - o50) / 120.0);
        let psi = vec![0.0, slope, 0.0, slope];
        let theta = crate::basis::MonotoneCoeffs::from_psi(m1, m2, &psi).theta;
        let tilted = hand_sample(m1, m2, vec![vec![DVector::from_vec(theta)]; 3], true);
        let z = excess_mortality(&tilted, &global, 0, &points).unwrap();
        assert!(
            (z.mean - 5.0).abs() < 1e-9,
            "expected exactly five percent, got {}",
            z.mean
        );
    }

    #[test]
    fn pooled_scalars_use_inverse_variance_weights() {
        let a: Vec<f64> = vec![1.0, 3.0, 1.0, 3.0];
        let b: Vec<f64> = vec![4.0, 10.0, 4.0, 10.0];
        // Deviations 1 and 3: weights 0.9 / 0.1.
        let pooled = pooled_scalar_draws(&[a, b]).unwrap();
        let want: Vec<f64> = vec![
            0.9 * 1.0 + 0.1 * 4.0,
            0.9 * 3.0 + 0.1 * 10.0,
            0.9 * 1.0 + 0.1 * 4.0,
            0.9 * 3.0 + 0.1 * 10.0,
        ];
        for (g, w) in pooled.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        let s = summarize_scalar(&pooled).unwrap();
        assert!((s.mean - mean(&want)).abs() < 1e-12);
    }

    #[test]
    fn support_mask_excludes_empty_regions() {
        // Days only in the left half of the rectangle.
        let mut points = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                points.push([50.0 * i as f64 / 29.0, 40.0 + 60.0 * j as f64 / 29.0]);
            }
        }
        let axes = GridAxes::over_ranges((0.0, 120.0), (40.0, 100.0), 13).unwrap();
        let mask = support_mask(&axes, &points);
        assert!(mask[(0, 6)], "dense left edge is supported");
        assert!(!mask[(12, 6)], "empty right edge is not");
    }

    #[test]
    fn grid_csv_lists_only_supported_points() {
        let (m1, m2) = (1, 1);
        let global = wide_global(m1, m2);
        let theta = DVector::from_vec(vec![0.0, 0.1, 0.0, 0.1]);
        let sample = hand_sample(m1, m2, vec![vec![theta]], true);
        let mut points = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                points.push([60.0 * i as f64 / 29.0, 40.0 + 60.0 * j as f64 / 29.0]);
            }
        }
        let axes = GridAxes::over_ranges((0.0, 120.0), (40.0, 100.0), 5).unwrap();
        let grid = log_rr_surface(&sample, &global, 0, &axes, &points).unwrap();
        let supported = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .filter(|&(i, j)| grid.support[(i, j)])
            .count();
        assert!(supported > 0 && supported < 25, "mask must be partial");

        let dir = tempdir().unwrap();
        let path = dir.path().join("grid.csv");
        write_grid_csv(&grid, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "ozone,temp,mean,sd,q2.5,q97.5,pr_gt0");
        assert_eq!(lines.len(), 1 + supported);
    }

    #[test]
    fn summary_tables_round_trip_to_csv() {
        let dir = tempdir().unwrap();

        let excess = vec![
            ExcessRow {
                scope: "city".into(),
                name: "aaa".into(),
                summary: ScalarSummary {
                    mean: 1.5,
                    sd: 0.25,
                    q_lo: 1.0,
                    q_hi: 2.0,
                },
            },
            ExcessRow {
                scope: "national".into(),
                name: "national".into(),
                summary: ScalarSummary {
                    mean: 1.25,
                    sd: 0.125,
                    q_lo: 1.0,
                    q_hi: 1.5,
                },
            },
        ];
        let excess_path = dir.path().join("excess.csv");
        write_excess_csv(&excess, &excess_path).unwrap();
        let text = std::fs::read_to_string(&excess_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "scope,name,mean,sd,q2.5,q97.5");
        assert_eq!(lines[1], "city,aaa,1.5,0.25,1,2");
        assert_eq!(lines[2], "national,national,1.25,0.125,1,1.5");

        let ratio = RatioSummary {
            mean: 2.0,
            q_lo: 1.5,
            q_hi: 2.5,
            pr_gt1: 0.975,
            defined: 1.0,
        };
        let with_common = StratifiedComparison {
            city_id: "aaa".into(),
            high_temp_window: (85.0, 95.0),
            moderate_temp_window: (60.0, 70.0),
            high_ozone_range: (30.0, 90.0),
            moderate_ozone_range: (10.0, 60.0),
            common_ozone_range: Some((30.0, 60.0)),
            n_high_days: 40,
            n_moderate_days: 250,
            ratio_observed: ratio.clone(),
            ratio_common: Some(ratio.clone()),
        };
        let without_common = StratifiedComparison {
            city_id: "bbb".into(),
            common_ozone_range: None,
            ratio_common: None,
            ..with_common.clone()
        };
        let strat_path = dir.path().join("stratified.csv");
        write_stratified_csv(&[with_common, without_common], &strat_path).unwrap();
        let text = std::fs::read_to_string(&strat_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("city_id,n_high_days,n_moderate_days,"));
        assert!(lines[1].contains("30,60,2,1.5,2.5,0.975,1,2,1.5,2.5,0.975,1"));
        // The no-overlap city leaves the common columns empty.
        assert!(lines[2].ends_with("0.975,1,,,,,"));
        assert!(lines[2].contains(",,2,1.5,2.5,0.975,1,,,,,"));
    }
}
