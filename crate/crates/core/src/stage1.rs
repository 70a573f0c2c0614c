//! First-stage fitting: each city gets an overdispersed Poisson regression of
//! daily deaths on a local Bernstein tensor surface plus the confounder
//! design, with a log-population offset. Results carry everything the second
//! stage and the reporting layer need: coefficient blocks, partitioned
//! covariance, local bases, the day-level (ozone, temperature) points, and
//! the confounder plan for out-of-sample prediction.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, BernsteinBasis1D, SurfaceSpec};
use crate::confounders::{ConfounderConfig, ConfounderError, ConfounderPlan};
use crate::data::{analyzed_days, in_ozone_season, stacked_response, AnalyzedDay, CityData, CityMeta};
use crate::glm::{fit_poisson_quasi, partition_covariance, CovBlocks, GlmError};

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("city {city_id}: {source}")]
    Basis {
        city_id: String,
        source: BasisError,
    },
    #[error("city {city_id}: {source}")]
    Confounder {
        city_id: String,
        source: ConfounderError,
    },
    #[error("city {city_id}: {source}")]
    Glm {
        city_id: String,
        source: GlmError,
    },
    #[error("city {city_id}: {n_days} analyzed days, need more than {need} (surface dimension)")]
    InsufficientDays {
        city_id: String,
        n_days: usize,
        need: usize,
    },
    #[error("no cities to fit")]
    NoCities,
    #[error("{path}: {message}")]
    Serialization { path: String, message: String },
}

/// How city-specific expansion orders are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OrderRule {
    /// Scale the global orders by the local/global range ratio, with floors
    /// of 6 (ozone) and 4 (temperature).
    Scaled,
    /// Use exactly these orders in every city (additive variants).
    Fixed(usize, usize),
}

/// Global domain and orders shared by all cities: the reference frame the
/// second stage pools in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBases {
    pub ozone_lo: f64,
    pub ozone_hi: f64,
    pub temp_lo: f64,
    pub temp_hi: f64,
    pub m1: usize,
    pub m2: usize,
    pub rule: OrderRule,
}

impl GlobalBases {
    /// Pools the covariate ranges of every analyzed day across cities.
    pub fn from_days(per_city: &[Vec<AnalyzedDay>], m1: usize, m2: usize) -> Option<GlobalBases> {
        let mut ozone_lo = f64::INFINITY;
        let mut ozone_hi = f64::NEG_INFINITY;
        let mut temp_lo = f64::INFINITY;
        let mut temp_hi = f64::NEG_INFINITY;
        let mut any = false;
        for days in per_city {
            for d in days {
                any = true;
                ozone_lo = ozone_lo.min(d.ozone);
                ozone_hi = ozone_hi.max(d.ozone);
                temp_lo = temp_lo.min(d.temp);
                temp_hi = temp_hi.max(d.temp);
            }
        }
        if !any || ozone_hi <= ozone_lo || temp_hi <= temp_lo {
            return None;
        }
        Some(GlobalBases {
            ozone_lo,
            ozone_hi,
            temp_lo,
            temp_hi,
            m1,
            m2,
            rule: OrderRule::Scaled,
        })
    }

    pub fn ozone_basis(&self) -> BernsteinBasis1D {
        BernsteinBasis1D::new("ozone", self.m1, self.ozone_lo, self.ozone_hi - self.ozone_lo)
            .expect("global ranges validated at construction")
    }

    pub fn temp_basis(&self) -> BernsteinBasis1D {
        BernsteinBasis1D::new("temp", self.m2, self.temp_lo, self.temp_hi - self.temp_lo)
            .expect("global ranges validated at construction")
    }
}

/// City-specific orders: the global order scaled by the range ratio, rounded
/// half-to-even, floored at 6 (ozone) and 4 (temperature).
pub fn local_orders(
    r1c: f64,
    r2c: f64,
    r1: f64,
    r2: f64,
    m1: usize,
    m2: usize,
) -> (usize, usize) {
    let m1c = ((r1c * m1 as f64 / r1).round_ties_even() as usize).max(6);
    let m2c = ((r2c * m2 as f64 / r2).round_ties_even() as usize).max(4);
    (m1c, m2c)
}

/// One city's first-stage estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Fit {
    pub meta: CityMeta,
    /// Surface coefficients, ozone index fastest within temperature blocks.
    pub beta_hat: DVector<f64>,
    /// Confounder coefficients (reference age intercept dropped).
    pub gamma_hat: DVector<f64>,
    pub gamma_labels: Vec<String>,
    pub v: CovBlocks,
    pub dispersion: f64,
    pub ozone_basis: BernsteinBasis1D,
    pub temp_basis: BernsteinBasis1D,
    pub n_days: usize,
    /// (ozone, temperature) per analyzed day, in day order.
    pub surf_points: Vec<[f64; 2]>,
    pub plan: ConfounderPlan,
}

impl Stage1Fit {
    pub fn surface_dim(&self) -> usize {
        (self.ozone_basis.order + 1) * (self.temp_basis.order + 1)
    }

    /// The fitted first-stage surface as an evaluable object.
    pub fn fitted_surface(&self) -> SurfaceSpec {
        SurfaceSpec {
            ozone_basis: self.ozone_basis.clone(),
            temp_basis: self.temp_basis.clone(),
            coeffs: self.beta_hat.iter().copied().collect(),
        }
    }
}

/// Running means on the full calendar record, then the ozone-season subset
/// of complete cases: the day list every fit runs on.
pub fn prepare_city(city: &CityData, cfg: &ConfounderConfig) -> Vec<AnalyzedDay> {
    let mut days = analyzed_days(city, cfg.rm_temp_window, cfg.rm_dew_window);
    days.retain(|d| in_ozone_season(d.date));
    days
}

/// The stacked design for one city: surface tensor block (replicated across
/// age groups) followed by the confounder design with its reference age
/// intercept dropped, since the tensor block already spans constants.
pub struct CityDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub offset: DVector<f64>,
    pub n_beta: usize,
    pub gamma_labels: Vec<String>,
    pub plan: ConfounderPlan,
}

pub fn build_city_design(
    days: &[AnalyzedDay],
    meta: &CityMeta,
    ozone_basis: &BernsteinBasis1D,
    temp_basis: &BernsteinBasis1D,
    plan: &ConfounderPlan,
) -> Result<CityDesign, Stage1Error> {
    let city_id = meta.city_id.clone();
    let n = days.len();
    let points: Vec<[f64; 2]> = days.iter().map(|d| [d.ozone, d.temp]).collect();
    let b = crate::basis::tensor_design(ozone_basis, temp_basis, &points).map_err(|source| {
        Stage1Error::Basis {
            city_id: city_id.clone(),
            source,
        }
    })?;
    let conf = plan.evaluate(days).map_err(|source| Stage1Error::Confounder {
        city_id: city_id.clone(),
        source,
    })?;
    let p1 = b.ncols();
    let p_conf = conf.matrix.ncols() - 1; // first age intercept dropped
    let mut x = DMatrix::<f64>::zeros(3 * n, p1 + p_conf);
    for age in 0..3 {
        for r in 0..n {
            let row = age * n + r;
            for c in 0..p1 {
                x[(row, c)] = b[(r, c)];
            }
            for c in 0..p_conf {
                x[(row, p1 + c)] = conf.matrix[(row, c + 1)];
            }
        }
    }
    let y = stacked_response(days);
    let offset = DVector::from_element(3 * n, (meta.population as f64).ln());
    Ok(CityDesign {
        x,
        y,
        offset,
        n_beta: p1,
        gamma_labels: conf.column_labels[1..].to_vec(),
        plan: plan.clone(),
    })
}

/// Fit one city end to end: local bases, design assembly, IRLS, partition.
pub fn fit_city(
    city: &CityData,
    global: &GlobalBases,
    cfg: &ConfounderConfig,
) -> Result<Stage1Fit, Stage1Error> {
    let days = prepare_city(city, cfg);
    fit_city_days(&days, &city.meta, global, cfg)
}

/// Same as `fit_city` for already-prepared days (cross-validation path,
/// where the basis ranges may come from the full pre-split data).
pub fn fit_city_days(
    days: &[AnalyzedDay],
    meta: &CityMeta,
    global: &GlobalBases,
    cfg: &ConfounderConfig,
) -> Result<Stage1Fit, Stage1Error> {
    fit_city_days_with_ranges(days, days, meta, global, cfg)
}

/// Fit on `days` while taking the local basis ranges from `range_days` (which
/// must cover `days`). The two coincide outside cross-validation.
pub fn fit_city_days_with_ranges(
    days: &[AnalyzedDay],
    range_days: &[AnalyzedDay],
    meta: &CityMeta,
    global: &GlobalBases,
    cfg: &ConfounderConfig,
) -> Result<Stage1Fit, Stage1Error> {
    let city_id = meta.city_id.clone();
    let ozone: Vec<f64> = range_days.iter().map(|d| d.ozone).collect();
    let temp: Vec<f64> = range_days.iter().map(|d| d.temp).collect();
    let (m1c, m2c) = match global.rule {
        OrderRule::Fixed(m1, m2) => (m1, m2),
        OrderRule::Scaled => {
            let r1c = ozone.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                - ozone.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let r2c = temp.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
                - temp.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            local_orders(
                r1c,
                r2c,
                global.ozone_hi - global.ozone_lo,
                global.temp_hi - global.temp_lo,
                global.m1,
                global.m2,
            )
        }
    };
    let wrap_basis = |source| Stage1Error::Basis {
        city_id: city_id.clone(),
        source,
    };
    let ozone_basis = BernsteinBasis1D::from_values("ozone", m1c, &ozone).map_err(wrap_basis)?;
    let temp_basis = BernsteinBasis1D::from_values("temp", m2c, &temp).map_err(wrap_basis)?;

    let p1 = (m1c + 1) * (m2c + 1);
    if days.len() <= p1 {
        return Err(Stage1Error::InsufficientDays {
            city_id,
            n_days: days.len(),
            need: p1,
        });
    }
    let plan = ConfounderPlan::build(days, cfg).map_err(|source| Stage1Error::Confounder {
        city_id: city_id.clone(),
        source,
    })?;
    let design = build_city_design(days, meta, &ozone_basis, &temp_basis, &plan)?;
    let fit = fit_poisson_quasi(&design.y, &design.x, &design.offset, 1e-8, 50).map_err(
        |source| Stage1Error::Glm {
            city_id: city_id.clone(),
            source,
        },
    )?;
    let blocks = partition_covariance(&fit.covariance, p1).map_err(|source| Stage1Error::Glm {
        city_id: city_id.clone(),
        source,
    })?;
    let beta_hat = DVector::from_iterator(p1, fit.coefficients.iter().take(p1).copied());
    let gamma_hat = DVector::from_iterator(
        fit.coefficients.len() - p1,
        fit.coefficients.iter().skip(p1).copied(),
    );
    Ok(Stage1Fit {
        meta: meta.clone(),
        beta_hat,
        gamma_hat,
        gamma_labels: design.gamma_labels,
        v: blocks,
        dispersion: fit.dispersion,
        ozone_basis,
        temp_basis,
        n_days: days.len(),
        surf_points: days.iter().map(|d| [d.ozone, d.temp]).collect(),
        plan: design.plan,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityFailure {
    pub city_id: String,
    pub reason: String,
}

/// Full first-stage result set, serializable so the second stage can run
/// without refitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Output {
    pub global: GlobalBases,
    pub confounders: ConfounderConfig,
    pub fits: Vec<Stage1Fit>,
    pub failures: Vec<CityFailure>,
}

impl Stage1Output {
    pub fn save(&self, path: &std::path::Path) -> Result<(), Stage1Error> {
        let file = std::fs::File::create(path).map_err(|e| Stage1Error::Serialization {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|e| {
            Stage1Error::Serialization {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Stage1Output, Stage1Error> {
        let file = std::fs::File::open(path).map_err(|e| Stage1Error::Serialization {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| {
            Stage1Error::Serialization {
                path: path.display().to_string(),
                message: e.to_string(),
            }
        })
    }
}

/// Fit all cities in parallel. Failures are collected, not fatal; the caller
/// decides whether a partial result set is acceptable. Global ranges are
/// pooled from the same analyzed days the fits use.
pub fn fit_cities(
    cities: &[CityData],
    m1: usize,
    m2: usize,
    cfg: &ConfounderConfig,
) -> Result<Stage1Output, Stage1Error> {
    if cities.is_empty() {
        return Err(Stage1Error::NoCities);
    }
    let per_city: Vec<Vec<AnalyzedDay>> = cities.iter().map(|c| prepare_city(c, cfg)).collect();
    let global = GlobalBases::from_days(&per_city, m1, m2).ok_or(Stage1Error::NoCities)?;
    let results: Vec<Result<Stage1Fit, Stage1Error>> = cities
        .par_iter()
        .zip(per_city.par_iter())
        .map(|(city, days)| fit_city_days(days, &city.meta, &global, cfg))
        .collect();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (city, result) in cities.iter().zip(results) {
        match result {
            Ok(fit) => fits.push(fit),
            Err(e) => {
                log::warn!("first-stage fit failed: {e}");
                failures.push(CityFailure {
                    city_id: city.meta.city_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(Stage1Output {
        global,
        confounders: cfg.clone(),
        fits,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec, TruthFamily};

    #[test]
    fn local_orders_match_worked_examples() {
        assert_eq!(local_orders(100.0, 50.0, 100.0, 50.0, 7, 9), (7, 9));
        assert_eq!(local_orders(1.0, 1.0, 100.0, 50.0, 7, 9), (6, 4));
        // half the global range with order 7: round-half-even(3.5) = 4,
        // floored to 6
        assert_eq!(local_orders(50.0, 50.0, 100.0, 50.0, 7, 9), (6, 9));
    }

    fn spec_for(n_days: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            n_cities: 1,
            days_per_city: n_days,
            family: TruthFamily::Interaction,
            seed,
            perturb_sd: 0.0,
            ..SynthSpec::default()
        }
    }

    fn light_confounders() -> ConfounderConfig {
        // long synthetic records span many study years; keep the time spline
        // small so the test fixture stays fast
        ConfounderConfig {
            time_df_per_year: 0.5,
            ..ConfounderConfig::default()
        }
    }

    /// Grid points inside both fits' domains with enough nearby data days.
    /// Ozone and temperature are correlated, so the joint support is a band;
    /// corners of the rectangle carry no information about the surface.
    fn supported_grid(fits: &[&Stage1Fit], days: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let lo1 = fits.iter().map(|f| f.ozone_basis.lo).fold(f64::MIN, f64::max);
        let hi1 = fits.iter().map(|f| f.ozone_basis.hi()).fold(f64::MAX, f64::min);
        let lo2 = fits.iter().map(|f| f.temp_basis.lo).fold(f64::MIN, f64::max);
        let hi2 = fits.iter().map(|f| f.temp_basis.hi()).fold(f64::MAX, f64::min);
        let (w1, w2) = ((hi1 - lo1) / 8.0, (hi2 - lo2) / 8.0);
        let mut grid = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                let oz = lo1 + (hi1 - lo1) * (0.05 + 0.9 * i as f64 / 19.0);
                let tp = lo2 + (hi2 - lo2) * (0.05 + 0.9 * j as f64 / 19.0);
                let near = days
                    .iter()
                    .filter(|d| (d[0] - oz).abs() < w1 && (d[1] - tp).abs() < w2)
                    .count();
                if near >= 5 {
                    grid.push([oz, tp]);
                }
            }
        }
        grid
    }

    fn centered_rmse_vs_truth(fit: &Stage1Fit, truth: &SurfaceSpec, grid: &[[f64; 2]]) -> f64 {
        let surf = fit.fitted_surface();
        let mut diffs = Vec::new();
        for pt in grid {
            let d =
                surf.eval_surface(pt[0], pt[1]).unwrap() - truth.eval_surface(pt[0], pt[1]).unwrap();
            diffs.push(d);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64).sqrt()
    }

    #[test]
    fn surface_rmse_shrinks_with_sample_size() {
        let (cities, truth) = generate_synthetic(&spec_for(8000, 31)).unwrap();
        let big = &cities[0];
        let small = CityData {
            meta: big.meta.clone(),
            days: big.days[..2000].to_vec(),
        };
        let cfg = light_confounders();
        let global = GlobalBases {
            ozone_lo: 0.0,
            ozone_hi: 120.0,
            temp_lo: 40.0,
            temp_hi: 100.0,
            m1: 6,
            m2: 4,
            rule: OrderRule::Scaled,
        };
        let fit_small = fit_city(&small, &global, &cfg).unwrap();
        let fit_big = fit_city(big, &global, &cfg).unwrap();
        // score both fits on the same grid, supported by the smaller dataset
        let grid = supported_grid(&[&fit_small, &fit_big], &fit_small.surf_points);
        assert!(grid.len() > 100, "support too thin: {} points", grid.len());
        let rmse_small = centered_rmse_vs_truth(&fit_small, &truth.cities[0].surface, &grid);
        let rmse_big = centered_rmse_vs_truth(&fit_big, &truth.cities[0].surface, &grid);
        assert!(
            rmse_big < 0.8 * rmse_small,
            "rmse {rmse_big} (n=8000) vs {rmse_small} (n=2000)"
        );
    }

    #[test]
    fn identical_cities_fit_identically() {
        let (cities, _) = generate_synthetic(&spec_for(900, 32)).unwrap();
        let a = &cities[0];
        let mut b = a.clone();
        b.meta.city_id = "copy".to_string();
        let cfg = light_confounders();
        let out = fit_cities(&[a.clone(), b], 7, 9, &cfg).unwrap();
        assert_eq!(out.fits.len(), 2);
        assert!(out.failures.is_empty());
        assert_eq!(out.fits[0].beta_hat, out.fits[1].beta_hat);
        assert_eq!(out.fits[0].gamma_hat, out.fits[1].gamma_hat);
        // local ranges sit inside the pooled global ranges
        for f in &out.fits {
            assert!(f.ozone_basis.lo >= out.global.ozone_lo - 1e-12);
            assert!(f.ozone_basis.hi() <= out.global.ozone_hi + 1e-12);
            assert!(f.temp_basis.lo >= out.global.temp_lo - 1e-12);
            assert!(f.temp_basis.hi() <= out.global.temp_hi + 1e-12);
        }
    }

    #[test]
    fn constant_ozone_is_a_degenerate_range_error() {
        let (mut cities, _) = generate_synthetic(&spec_for(400, 33)).unwrap();
        for d in &mut cities[0].days {
            d.ozone = Some(50.0);
        }
        let global = GlobalBases {
            ozone_lo: 0.0,
            ozone_hi: 120.0,
            temp_lo: 40.0,
            temp_hi: 100.0,
            m1: 7,
            m2: 9,
            rule: OrderRule::Scaled,
        };
        match fit_city(&cities[0], &global, &light_confounders()) {
            Err(Stage1Error::Basis { .. }) => {}
            other => panic!("expected degenerate-range error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_days_for_the_surface_dimension() {
        let (cities, _) = generate_synthetic(&spec_for(60, 34)).unwrap();
        let global = GlobalBases {
            ozone_lo: 0.0,
            ozone_hi: 120.0,
            temp_lo: 40.0,
            temp_hi: 100.0,
            m1: 9,
            m2: 9,
            rule: OrderRule::Fixed(9, 9),
        };
        match fit_city(&cities[0], &global, &light_confounders()) {
            Err(Stage1Error::InsufficientDays { n_days, need, .. }) => {
                assert_eq!(need, 100);
                assert_eq!(n_days, 60);
            }
            other => panic!("expected sample-size error, got {other:?}"),
        }
    }

    #[test]
    fn output_round_trips_through_json() {
        let (cities, _) = generate_synthetic(&spec_for(700, 35)).unwrap();
        let cfg = light_confounders();
        let out = fit_cities(&cities, 7, 9, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage1.json");
        out.save(&path).unwrap();
        let back = Stage1Output::load(&path).unwrap();
        assert_eq!(back.fits.len(), out.fits.len());
        assert_eq!(back.fits[0].beta_hat, out.fits[0].beta_hat);
        assert_eq!(back.fits[0].v.v11, out.fits[0].v.v11);
        assert_eq!(back.global, out.global);
        assert_eq!(back.fits[0].surf_points, out.fits[0].surf_points);
    }

    #[test]
    fn additive_rule_gives_ozone_only_surface() {
        let (cities, _) = generate_synthetic(&spec_for(800, 36)).unwrap();
        let mut cfg = light_confounders();
        cfg.include_same_day_temp = true;
        let global = GlobalBases {
            ozone_lo: 0.0,
            ozone_hi: 120.0,
            temp_lo: 40.0,
            temp_hi: 100.0,
            m1: 4,
            m2: 0,
            rule: OrderRule::Fixed(4, 0),
        };
        let fit = fit_city(&cities[0], &global, &cfg).unwrap();
        assert_eq!(fit.beta_hat.len(), 5);
        assert!(fit.gamma_labels.iter().any(|l| l.starts_with("temp_")));
        // order-zero temperature factor: the surface is flat in temperature
        let s = fit.fitted_surface();
        let a = s.eval_surface(60.0, 50.0).unwrap();
        let b = s.eval_surface(60.0, 90.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
