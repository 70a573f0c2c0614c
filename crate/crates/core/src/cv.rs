//! Out-of-sample comparison of the model variants. Each city's analyzed days
//! are split once into training and holdout sets; every variant trains on
//! the same training days and is scored by Poisson deviance on the same
//! holdout days, overall and within high-ozone and high-temperature tails.
//!
//! Basis ranges (local and pooled) are frozen from the full pre-split data
//! so holdout days always fall inside the fitted domains; everything else,
//! including the confounder knot placement, comes from the training days
//! alone.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::transform_inverse;
use crate::config::{ModelVariant, RunConfig};
use crate::data::{AnalyzedDay, CityData, CityMeta};
use crate::hier::{
    gamma_posterior_mean, projection_matrix, run_chain, HierError, PosteriorSample,
};
use crate::math::{derive_rng, ln_factorial, quantile, MathError};
use crate::stage1::{
    build_city_design, fit_city_days_with_ranges, prepare_city, GlobalBases, OrderRule,
    Stage1Error, Stage1Fit, Stage1Output,
};

#[derive(Debug, Error)]
pub enum CvError {
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
    #[error(transparent)]
    Hier(#[from] HierError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("bad split: {0}")]
    Split(String),
    #[error("predicted mean {value} is not a positive finite number")]
    BadPrediction { value: f64 },
    #[error("observed and predicted lengths differ: {observed} vs {predicted}")]
    LengthMismatch { observed: usize, predicted: usize },
    #[error("no usable cities or days")]
    Empty,
    #[error("{path}: {message}")]
    Serialization { path: String, message: String },
}

/// Day indices of one city's train/holdout partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutSplit {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Split `n` days, keeping `train_fraction` of them for training. The
/// default draws the holdout uniformly over days; `block` instead holds out
/// one contiguous run of days (harder, since errors cannot borrow from
/// neighboring days). Both parts are always nonempty.
pub fn split_holdout(
    n: usize,
    train_fraction: f64,
    block: bool,
    seed: u64,
    label: &str,
) -> Result<HoldoutSplit, CvError> {
    if n < 2 {
        return Err(CvError::Split(format!("need at least 2 days, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CvError::Split(format!(
            "training fraction must be strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_hold = n - n_train;
    let mut rng = derive_rng(seed, &format!("cv-split-{label}"));
    let (mut train, mut holdout): (Vec<usize>, Vec<usize>) = if block {
        let start = rng.random_range(0..=n - n_hold);
        let holdout: Vec<usize> = (start..start + n_hold).collect();
        let train = (0..start).chain(start + n_hold..n).collect();
        (train, holdout)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let holdout = idx.split_off(n_train);
        (idx, holdout)
    };
    train.sort_unstable();
    holdout.sort_unstable();
    Ok(HoldoutSplit { train, holdout })
}

/// Poisson deviance of predicted means against observed counts:
/// `sum 2 (yhat - y ln yhat + ln y!)`, which is minus twice the Poisson
/// log-likelihood. Zero for an empty slice. Every predicted mean must be
/// positive and finite.
pub fn holdout_deviance(y: &[f64], yhat: &[f64]) -> Result<f64, CvError> {
    if y.len() != yhat.len() {
        return Err(CvError::LengthMismatch {
            observed: y.len(),
            predicted: yhat.len(),
        });
    }
    let mut total = 0.0;
    for (&yi, &mu) in y.iter().zip(yhat) {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(CvError::BadPrediction { value: mu });
        }
        let fit_term = if yi > 0.0 { yi * mu.ln() } else { 0.0 };
        total += 2.0 * (mu - fit_term + ln_factorial(yi));
    }
    Ok(total)
}

/// Holdout deviance overall and restricted to the covariate tails, with the
/// day counts behind each restriction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TailDeviance {
    pub overall: f64,
    pub ozone_tail: f64,
    pub temp_tail: f64,
    pub joint_tail: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VariantCv {
    pub variant: ModelVariant,
    pub deviance: TailDeviance,
    /// Post-burn-in acceptance rate of the spatial range update, 1.0 for
    /// nonspatial variants.
    pub acceptance_rho: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CvReport {
    pub seed: u64,
    pub train_fraction: f64,
    pub block: bool,
    pub n_cities: usize,
    /// Holdout day counts summed over cities, per restriction.
    pub holdout_days: usize,
    pub ozone_tail_days: usize,
    pub temp_tail_days: usize,
    pub joint_tail_days: usize,
    pub results: Vec<VariantCv>,
}

impl CvReport {
    pub fn result(&self, variant: ModelVariant) -> Option<&VariantCv> {
        self.results.iter().find(|r| r.variant == variant)
    }

    /// One row per variant with the deviance columns and their differences
    /// against the additive linear reference (negative is better).
    pub fn write_csv(&self, path: &Path) -> Result<(), CvError> {
        let to_err = |message: String| CvError::Serialization {
            path: path.display().to_string(),
            message,
        };
        let baseline = self
            .result(ModelVariant::AdditiveLinear)
            .map(|r| r.deviance.clone());
        let mut w = csv::Writer::from_path(path).map_err(|e| to_err(e.to_string()))?;
        w.write_record([
            "model",
            "deviance",
            "ozone_tail",
            "temp_tail",
            "joint_tail",
            "vs_additive_linear",
            "vs_additive_linear_ozone_tail",
            "vs_additive_linear_temp_tail",
            "vs_additive_linear_joint_tail",
            "holdout_days",
            "train_fraction",
            "seed",
        ])
        .map_err(|e| to_err(e.to_string()))?;
        for r in &self.results {
            let delta = |f: fn(&TailDeviance) -> f64| match &baseline {
                Some(b) => (f(&r.deviance) - f(b)).to_string(),
                None => String::new(),
            };
            w.write_record([
                r.variant.as_str().to_string(),
                r.deviance.overall.to_string(),
                r.deviance.ozone_tail.to_string(),
                r.deviance.temp_tail.to_string(),
                r.deviance.joint_tail.to_string(),
                delta(|d| d.overall),
                delta(|d| d.ozone_tail),
                delta(|d| d.temp_tail),
                delta(|d| d.joint_tail),
                self.holdout_days.to_string(),
                self.train_fraction.to_string(),
                self.seed.to_string(),
            ])
            .map_err(|e| to_err(e.to_string()))?;
        }
        w.flush().map_err(|e| to_err(e.to_string()))
    }
}

/// A prepared city with its split and full-data tail thresholds.
struct CityCv {
    meta: CityMeta,
    train: Vec<AnalyzedDay>,
    holdout: Vec<AnalyzedDay>,
    full: Vec<AnalyzedDay>,
    ozone_q95: f64,
    temp_q95: f64,
}

/// Observed counts and posterior predicted means on one city's holdout
/// rows (ages stacked day-major within age).
fn predict_city(
    fit: &Stage1Fit,
    global: &GlobalBases,
    t_inv: &DMatrix<f64>,
    sample: &PosteriorSample,
    city: usize,
    days: &[AnalyzedDay],
    meta: &CityMeta,
) -> Result<(DVector<f64>, DVector<f64>), CvError> {
    let design = build_city_design(days, meta, &fit.ozone_basis, &fit.temp_basis, &fit.plan)?;
    let a = projection_matrix(fit, global, t_inv)?;
    let theta = sample.theta_mean(city);
    let beta = &a * &theta;
    let gamma = gamma_posterior_mean(fit, &a, &theta)?;
    let mut coef = DVector::zeros(design.x.ncols());
    coef.rows_mut(0, design.n_beta).copy_from(&beta);
    coef.rows_mut(design.n_beta, gamma.len()).copy_from(&gamma);
    let eta = &design.offset + &design.x * coef;
    Ok((design.y, eta.map(f64::exp)))
}

/// Deviance contributions of one city, overall and on its tails. Row r of
/// the stacked vectors corresponds to day `r % n_days`.
fn city_deviances(
    y: &DVector<f64>,
    yhat: &DVector<f64>,
    day_in_tail: impl Fn(usize) -> (bool, bool),
) -> Result<TailDeviance, CvError> {
    let rows = y.len();
    let n_days = rows / 3;
    let mut sets: [(Vec<f64>, Vec<f64>); 4] = Default::default();
    for r in 0..rows {
        let (oz, tp) = day_in_tail(r % n_days);
        let mut push = |k: usize| {
            sets[k].0.push(y[r]);
            sets[k].1.push(yhat[r]);
        };
        push(0);
        if oz {
            push(1);
        }
        if tp {
            push(2);
        }
        if oz && tp {
            push(3);
        }
    }
    Ok(TailDeviance {
        overall: holdout_deviance(&sets[0].0, &sets[0].1)?,
        ozone_tail: holdout_deviance(&sets[1].0, &sets[1].1)?,
        temp_tail: holdout_deviance(&sets[2].0, &sets[2].1)?,
        joint_tail: holdout_deviance(&sets[3].0, &sets[3].1)?,
    })
}

fn add(into: &mut TailDeviance, from: &TailDeviance) {
    into.overall += from.overall;
    into.ozone_tail += from.ozone_tail;
    into.temp_tail += from.temp_tail;
    into.joint_tail += from.joint_tail;
}

/// Train every requested variant on the shared split and score the holdout.
///
/// The four surface variants share one set of first-stage fits (they differ
/// only in the second stage); the additive variants refit the first stage
/// with an ozone-only basis and a same-day temperature spline among the
/// confounders, then pool without the cone or the spatial kernel.
pub fn run_cv(
    cities: &[CityData],
    config: &RunConfig,
    variants: &[ModelVariant],
) -> Result<CvReport, CvError> {
    if cities.is_empty() || variants.is_empty() {
        return Err(CvError::Empty);
    }
    let cfg_surface = config.confounders(false);
    let cfg_additive = config.confounders(true);

    // Shared split: the analyzed day set depends only on the running-mean
    // windows, which both confounder settings share.
    let mut prepared = Vec::with_capacity(cities.len());
    for city in cities {
        let full = prepare_city(city, &cfg_surface);
        if full.len() < 2 {
            return Err(CvError::Split(format!(
                "city {} has {} analyzed days",
                city.meta.city_id,
                full.len()
            )));
        }
        let split = split_holdout(
            full.len(),
            config.cv_fraction,
            config.cv_block,
            config.seed,
            &city.meta.city_id,
        )?;
        let pick = |idx: &[usize]| -> Vec<AnalyzedDay> {
            idx.iter().map(|&i| full[i].clone()).collect()
        };
        let ozone: Vec<f64> = full.iter().map(|d| d.ozone).collect();
        let temp: Vec<f64> = full.iter().map(|d| d.temp).collect();
        prepared.push(CityCv {
            meta: city.meta.clone(),
            train: pick(&split.train),
            holdout: pick(&split.holdout),
            ozone_q95: quantile(&ozone, 0.95)?,
            temp_q95: quantile(&temp, 0.95)?,
            full,
        });
    }

    let full_sets: Vec<Vec<AnalyzedDay>> = prepared.iter().map(|c| c.full.clone()).collect();
    let global_surface =
        GlobalBases::from_days(&full_sets, config.m1, config.m2).ok_or(CvError::Empty)?;
    let additive_global = |order: usize| GlobalBases {
        m1: order,
        m2: 0,
        rule: OrderRule::Fixed(order, 0),
        ..global_surface.clone()
    };
    let global_nonlinear = additive_global(4);
    let global_linear = additive_global(1);

    let fit_family = |global: &GlobalBases,
                      cfg: &crate::confounders::ConfounderConfig|
     -> Result<Vec<Stage1Fit>, CvError> {
        prepared
            .iter()
            .map(|c| {
                Ok(fit_city_days_with_ranges(
                    &c.train, &c.full, &c.meta, global, cfg,
                )?)
            })
            .collect()
    };
    let need_surface = variants.iter().any(|v| v.is_surface());
    let fits_surface = if need_surface {
        Some(fit_family(&global_surface, &cfg_surface)?)
    } else {
        None
    };
    let fits_nonlinear = if variants.contains(&ModelVariant::AdditiveNonlinear) {
        Some(fit_family(&global_nonlinear, &cfg_additive)?)
    } else {
        None
    };
    let fits_linear = if variants.contains(&ModelVariant::AdditiveLinear) {
        Some(fit_family(&global_linear, &cfg_additive)?)
    } else {
        None
    };

    let mut results = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (global, fits, cfg) = if variant.is_surface() {
            (&global_surface, fits_surface.as_ref().unwrap(), &cfg_surface)
        } else if variant == ModelVariant::AdditiveNonlinear {
            (
                &global_nonlinear,
                fits_nonlinear.as_ref().unwrap(),
                &cfg_additive,
            )
        } else {
            (&global_linear, fits_linear.as_ref().unwrap(), &cfg_additive)
        };
        let stage1 = Stage1Output {
            global: global.clone(),
            confounders: cfg.clone(),
            fits: fits.clone(),
            failures: vec![],
        };
        let sample = run_chain(&stage1, &config.hyperpriors(), &config.chain_for(variant))?;
        let t_inv = transform_inverse(global.m1, global.m2);
        let mut total = TailDeviance {
            overall: 0.0,
            ozone_tail: 0.0,
            temp_tail: 0.0,
            joint_tail: 0.0,
        };
        for (c, city) in prepared.iter().enumerate() {
            let (y, yhat) = predict_city(
                &fits[c],
                global,
                &t_inv,
                &sample,
                c,
                &city.holdout,
                &city.meta,
            )?;
            let dev = city_deviances(&y, &yhat, |day| {
                (
                    city.holdout[day].ozone > city.ozone_q95,
                    city.holdout[day].temp > city.temp_q95,
                )
            })?;
            add(&mut total, &dev);
        }
        results.push(VariantCv {
            variant,
            deviance: total,
            acceptance_rho: sample.acceptance_rho,
        });
    }

    let count_days = |pred: &dyn Fn(&AnalyzedDay, &CityCv) -> bool| {
        prepared
            .iter()
            .map(|c| c.holdout.iter().filter(|d| pred(d, c)).count())
            .sum()
    };
    Ok(CvReport {
        seed: config.seed,
        train_fraction: config.cv_fraction,
        block: config.cv_block,
        n_cities: prepared.len(),
        holdout_days: prepared.iter().map(|c| c.holdout.len()).sum(),
        ozone_tail_days: count_days(&|d, c| d.ozone > c.ozone_q95),
        temp_tail_days: count_days(&|d, c| d.temp > c.temp_q95),
        joint_tail_days: count_days(&|d, c| d.ozone > c.ozone_q95 && d.temp > c.temp_q95),
        results,
    })
}
