//! Model variants and the flat key-value run configuration shared by the
//! command-line pipeline.
//!
//! Configuration layers in increasing precedence: built-in defaults, then a
//! plain-text file of `key = value` lines, then explicit overrides (command
//! flags). Unknown keys are errors so typos surface immediately.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::Weekday;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confounders::ConfounderConfig;
use crate::data::{SynthSpec, TruthFamily};
use crate::hier::{ChainConfig, Hyperpriors};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path} line {line}: expected 'key = value', got '{text}'")]
    Parse {
        path: String,
        line: usize,
        text: String,
    },
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': cannot parse '{value}' as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("unknown model variant '{0}'")]
    UnknownVariant(String),
}

/// The six fitted models compared in the cross-validation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Monotone surface, spatially correlated cities.
    SpatialMonotone,
    /// Monotone surface, independent cities.
    NonspatialMonotone,
    /// Unconstrained surface, spatially correlated cities.
    SpatialUnconstrained,
    /// Unconstrained surface, independent cities.
    NonspatialUnconstrained,
    /// Additive model: smooth ozone main effect plus temperature spline.
    AdditiveNonlinear,
    /// Additive model: linear ozone plus temperature spline.
    AdditiveLinear,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::SpatialMonotone,
        ModelVariant::NonspatialMonotone,
        ModelVariant::SpatialUnconstrained,
        ModelVariant::NonspatialUnconstrained,
        ModelVariant::AdditiveNonlinear,
        ModelVariant::AdditiveLinear,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::SpatialMonotone => "spatial-monotone",
            ModelVariant::NonspatialMonotone => "nonspatial-monotone",
            ModelVariant::SpatialUnconstrained => "spatial-unconstrained",
            ModelVariant::NonspatialUnconstrained => "nonspatial-unconstrained",
            ModelVariant::AdditiveNonlinear => "additive-nonlinear",
            ModelVariant::AdditiveLinear => "additive-linear",
        }
    }

    /// Cities correlated through the exponential kernel in stage two.
    pub fn spatial(&self) -> bool {
        matches!(
            self,
            ModelVariant::SpatialMonotone | ModelVariant::SpatialUnconstrained
        )
    }

    /// Stage two applies the monotone cone link.
    pub fn monotone(&self) -> bool {
        matches!(
            self,
            ModelVariant::SpatialMonotone | ModelVariant::NonspatialMonotone
        )
    }

    /// Full bivariate surface (as opposed to the additive reductions).
    pub fn is_surface(&self) -> bool {
        !matches!(
            self,
            ModelVariant::AdditiveNonlinear | ModelVariant::AdditiveLinear
        )
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelVariant::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| ConfigError::UnknownVariant(s.to_string()))
    }
}

/// Every tunable of the pipeline with its default. Field names double as
/// the configuration-file keys (snake_case, `key = value`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    // Pooled basis orders.
    pub m1: usize,
    pub m2: usize,
    // Stage-two chain.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub step_sd: f64,
    pub repair_v11: bool,
    // Hyperpriors.
    pub tau0: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    pub mu_rho: f64,
    pub sigma_rho: f64,
    // Model selection.
    pub variant: ModelVariant,
    // Reporting.
    pub grid: usize,
    // Cross-validation.
    pub cv_fraction: f64,
    pub cv_block: bool,
    // Synthetic data generation.
    pub n_cities: usize,
    pub days_per_city: usize,
    pub family: TruthFamily,
    pub ozone_effect: f64,
    pub temp_curvature: f64,
    pub interaction_effect: f64,
    pub perturb_sd: f64,
    pub confounder_scale: f64,
    pub missing_rate: f64,
    pub start_year: i32,
    // Confounder design.
    pub rm_temp_window: usize,
    pub rm_dew_window: usize,
    pub time_df_per_year: f64,
    pub min_time_df: usize,
    pub rm_temp_df: usize,
    pub dew_df: usize,
    pub rm_dew_df: usize,
    pub same_day_temp_df: usize,
    pub reference_day: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let conf = ConfounderConfig::default();
        let chain = ChainConfig::default();
        let hyper = Hyperpriors::default();
        RunConfig {
            m1: 7,
            m2: 9,
            iterations: chain.iterations,
            burn_in: chain.burn_in,
            thin: chain.thin,
            seed: chain.seed,
            step_sd: chain.initial_step_sd,
            repair_v11: chain.repair_v11,
            tau0: hyper.tau0,
            a_tau: hyper.a_tau,
            b_tau: hyper.b_tau,
            mu_rho: hyper.mu_rho,
            sigma_rho: hyper.sigma_rho,
            variant: ModelVariant::SpatialMonotone,
            grid: 101,
            cv_fraction: 0.8,
            cv_block: false,
            n_cities: synth.n_cities,
            days_per_city: synth.days_per_city,
            family: synth.family,
            ozone_effect: synth.ozone_effect,
            temp_curvature: synth.temp_curvature,
            interaction_effect: synth.interaction_effect,
            perturb_sd: synth.perturb_sd,
            confounder_scale: synth.confounder_scale,
            missing_rate: synth.missing_rate,
            start_year: synth.start_year,
            rm_temp_window: conf.rm_temp_window,
            rm_dew_window: conf.rm_dew_window,
            time_df_per_year: conf.time_df_per_year,
            min_time_df: conf.min_time_df,
            rm_temp_df: conf.rm_temp_df,
            dew_df: conf.dew_df,
            rm_dew_df: conf.rm_dew_df,
            same_day_temp_df: conf.same_day_temp_df,
            reference_day: "sun".to_string(),
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_family(key: &str, value: &str) -> Result<TruthFamily, ConfigError> {
    match value.replace('_', "-").as_str() {
        "additive-linear" => Ok(TruthFamily::AdditiveLinear),
        "additive-nonlinear" => Ok(TruthFamily::AdditiveNonlinear),
        "interaction" => Ok(TruthFamily::Interaction),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "one of additive-linear, additive-nonlinear, interaction",
        }),
    }
}

pub(crate) fn parse_weekday(value: &str) -> Option<Weekday> {
    match value.to_ascii_lowercase().as_str() {
        "mon" | "monday" => Some(Weekday::Mon),
        "tue" | "tuesday" => Some(Weekday::Tue),
        "wed" | "wednesday" => Some(Weekday::Wed),
        "thu" | "thursday" => Some(Weekday::Thu),
        "fri" | "friday" => Some(Weekday::Fri),
        "sat" | "saturday" => Some(Weekday::Sat),
        "sun" | "sunday" => Some(Weekday::Sun),
        _ => None,
    }
}

/// Every configuration key with a one-line description, in display order.
pub const KEY_DOCS: [(&str, &str); 36] = [
    ("m1", "pooled Bernstein order in the ozone direction"),
    ("m2", "pooled Bernstein order in the temperature direction"),
    ("iterations", "total second-stage Gibbs iterations"),
    ("burn_in", "iterations discarded before recording"),
    ("thin", "keep every thin-th post-burn-in iteration"),
    ("seed", "master seed; all randomness derives from it by labeled streams"),
    ("step_sd", "initial random-walk step of the spatial range update"),
    ("repair_v11", "floor tiny eigenvalues of first-stage covariances"),
    ("tau0", "prior standard deviation of the overall level mu0"),
    ("a_tau", "shape of the inverse-gamma prior on tau"),
    ("b_tau", "rate of the inverse-gamma prior on tau"),
    ("mu_rho", "prior mean of log rho (spatial range, km)"),
    ("sigma_rho", "prior standard deviation of log rho"),
    ("variant", "model fitted by the stage2 command"),
    ("grid", "surface grid resolution per axis"),
    ("cv_fraction", "fraction of days used for training in cv"),
    ("cv_block", "hold out one contiguous block instead of random days"),
    ("n_cities", "synthetic cities to generate"),
    ("days_per_city", "calendar days per synthetic city"),
    ("family", "synthetic truth family"),
    ("ozone_effect", "synthetic ozone main-effect size"),
    ("temp_curvature", "synthetic temperature curvature"),
    ("interaction_effect", "synthetic ozone-temperature synergy size"),
    ("perturb_sd", "between-city perturbation of the synthetic truth"),
    ("confounder_scale", "amplitude of synthetic seasonal confounding"),
    ("missing_rate", "chance each synthetic covariate value is missing"),
    ("start_year", "first calendar year of the synthetic record"),
    ("rm_temp_window", "running-mean window (days) for temperature"),
    ("rm_dew_window", "running-mean window (days) for dewpoint"),
    ("time_df_per_year", "seasonal spline df per study year"),
    ("min_time_df", "lower bound on the seasonal spline df"),
    ("rm_temp_df", "spline df for running-mean temperature"),
    ("dew_df", "spline df for same-day dewpoint"),
    ("rm_dew_df", "spline df for running-mean dewpoint"),
    (
        "same_day_temp_df",
        "spline df for same-day temperature in the additive variants",
    ),
    ("reference_day", "weekday absorbed into the intercept"),
];

impl RunConfig {
    /// Render one key's current value in the same form `apply` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "m1" => self.m1.to_string(),
            "m2" => self.m2.to_string(),
            "iterations" => self.iterations.to_string(),
            "burn_in" => self.burn_in.to_string(),
            "thin" => self.thin.to_string(),
            "seed" => self.seed.to_string(),
            "step_sd" => self.step_sd.to_string(),
            "repair_v11" => self.repair_v11.to_string(),
            "tau0" => self.tau0.to_string(),
            "a_tau" => self.a_tau.to_string(),
            "b_tau" => self.b_tau.to_string(),
            "mu_rho" => self.mu_rho.to_string(),
            "sigma_rho" => self.sigma_rho.to_string(),
            "variant" => self.variant.as_str().to_string(),
            "grid" => self.grid.to_string(),
            "cv_fraction" => self.cv_fraction.to_string(),
            "cv_block" => self.cv_block.to_string(),
            "n_cities" => self.n_cities.to_string(),
            "days_per_city" => self.days_per_city.to_string(),
            "family" => self.family.as_str().to_string(),
            "ozone_effect" => self.ozone_effect.to_string(),
            "temp_curvature" => self.temp_curvature.to_string(),
            "interaction_effect" => self.interaction_effect.to_string(),
            "perturb_sd" => self.perturb_sd.to_string(),
            "confounder_scale" => self.confounder_scale.to_string(),
            "missing_rate" => self.missing_rate.to_string(),
            "start_year" => self.start_year.to_string(),
            "rm_temp_window" => self.rm_temp_window.to_string(),
            "rm_dew_window" => self.rm_dew_window.to_string(),
            "time_df_per_year" => self.time_df_per_year.to_string(),
            "min_time_df" => self.min_time_df.to_string(),
            "rm_temp_df" => self.rm_temp_df.to_string(),
            "dew_df" => self.dew_df.to_string(),
            "rm_dew_df" => self.rm_dew_df.to_string(),
            "same_day_temp_df" => self.same_day_temp_df.to_string(),
            "reference_day" => self.reference_day.clone(),
            _ => return None,
        })
    }

    /// Apply one `key = value` pair; used both by the file parser and by
    /// command-line overrides so the two layers cannot drift apart.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "m1" => self.m1 = parse_as(key, value, "a nonnegative integer")?,
            "m2" => self.m2 = parse_as(key, value, "a nonnegative integer")?,
            "iterations" => self.iterations = parse_as(key, value, "a positive integer")?,
            "burn_in" => self.burn_in = parse_as(key, value, "a nonnegative integer")?,
            "thin" => self.thin = parse_as(key, value, "a positive integer")?,
            "seed" => self.seed = parse_as(key, value, "an unsigned integer")?,
            "step_sd" => self.step_sd = parse_as(key, value, "a positive number")?,
            "repair_v11" => self.repair_v11 = parse_as(key, value, "true or false")?,
            "tau0" => self.tau0 = parse_as(key, value, "a positive number")?,
            "a_tau" => self.a_tau = parse_as(key, value, "a positive number")?,
            "b_tau" => self.b_tau = parse_as(key, value, "a positive number")?,
            "mu_rho" => self.mu_rho = parse_as(key, value, "a number")?,
            "sigma_rho" => self.sigma_rho = parse_as(key, value, "a positive number")?,
            "variant" => self.variant = value.parse()?,
            "grid" => self.grid = parse_as(key, value, "an integer >= 2")?,
            "cv_fraction" => self.cv_fraction = parse_as(key, value, "a fraction in (0,1)")?,
            "cv_block" => self.cv_block = parse_as(key, value, "true or false")?,
            "n_cities" => self.n_cities = parse_as(key, value, "a positive integer")?,
            "days_per_city" => self.days_per_city = parse_as(key, value, "a positive integer")?,
            "family" => self.family = parse_family(key, value)?,
            "ozone_effect" => self.ozone_effect = parse_as(key, value, "a number")?,
            "temp_curvature" => self.temp_curvature = parse_as(key, value, "a number")?,
            "interaction_effect" => {
                self.interaction_effect = parse_as(key, value, "a number")?
            }
            "perturb_sd" => self.perturb_sd = parse_as(key, value, "a nonnegative number")?,
            "confounder_scale" => {
                self.confounder_scale = parse_as(key, value, "a nonnegative number")?
            }
            "missing_rate" => self.missing_rate = parse_as(key, value, "a rate in [0,1)")?,
            "start_year" => self.start_year = parse_as(key, value, "a calendar year")?,
            "rm_temp_window" => self.rm_temp_window = parse_as(key, value, "a positive integer")?,
            "rm_dew_window" => self.rm_dew_window = parse_as(key, value, "a positive integer")?,
            "time_df_per_year" => {
                self.time_df_per_year = parse_as(key, value, "a positive number")?
            }
            "min_time_df" => self.min_time_df = parse_as(key, value, "a positive integer")?,
            "rm_temp_df" => self.rm_temp_df = parse_as(key, value, "a positive integer")?,
            "dew_df" => self.dew_df = parse_as(key, value, "a positive integer")?,
            "rm_dew_df" => self.rm_dew_df = parse_as(key, value, "a positive integer")?,
            "same_day_temp_df" => {
                self.same_day_temp_df = parse_as(key, value, "a positive integer")?
            }
            "reference_day" => {
                if parse_weekday(value).is_none() {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                        expected: "a weekday name (sun, mon, ...)",
                    });
                }
                self.reference_day = value.to_string();
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Layer a flat `key = value` file on top of the current values.
    /// Blank lines and `#` comments are ignored.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                text: line.to_string(),
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn hyperpriors(&self) -> Hyperpriors {
        Hyperpriors {
            tau0: self.tau0,
            a_tau: self.a_tau,
            b_tau: self.b_tau,
            mu_rho: self.mu_rho,
            sigma_rho: self.sigma_rho,
        }
    }

    /// Chain settings with the variant's spatial/monotone switches applied.
    pub fn chain_for(&self, variant: ModelVariant) -> ChainConfig {
        ChainConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            spatial: variant.spatial(),
            monotone: variant.monotone(),
            prior_only: false,
            initial_step_sd: self.step_sd,
            repair_v11: self.repair_v11,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_cities: self.n_cities,
            days_per_city: self.days_per_city,
            family: self.family,
            seed: self.seed,
            ozone_effect: self.ozone_effect,
            temp_curvature: self.temp_curvature,
            interaction_effect: self.interaction_effect,
            perturb_sd: self.perturb_sd,
            confounder_scale: self.confounder_scale,
            missing_rate: self.missing_rate,
            start_year: self.start_year,
        }
    }

    /// Confounder design settings; the additive variants additionally turn
    /// on the same-day temperature spline when building their own design.
    pub fn confounders(&self, include_same_day_temp: bool) -> ConfounderConfig {
        ConfounderConfig {
            rm_temp_window: self.rm_temp_window,
            rm_dew_window: self.rm_dew_window,
            time_df_per_year: self.time_df_per_year,
            min_time_df: self.min_time_df,
            rm_temp_df: self.rm_temp_df,
            dew_df: self.dew_df,
            rm_dew_df: self.rm_dew_df,
            same_day_temp_df: self.same_day_temp_df,
            include_same_day_temp,
            reference_day: parse_weekday(&self.reference_day).unwrap_or(Weekday::Sun),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::tempdir;

    #[test]
    fn every_documented_key_round_trips_through_get_and_apply() {
        let mut defaults = RunConfig::default();
        // Exercise the non-default family spellings too.
        defaults.apply("family", "additive-nonlinear").unwrap();
        let mut rebuilt = RunConfig::default();
        for (key, help) in KEY_DOCS {
            assert!(!help.is_empty());
            let value = defaults.get(key).unwrap_or_else(|| {
                panic!("documented key '{key}' has no getter");
            });
            rebuilt
                .apply(key, &value)
                .unwrap_or_else(|e| panic!("documented key '{key}' rejected: {e}"));
        }
        assert!(defaults.get("no_such_key").is_none());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ModelVariant::ALL {
            let parsed: ModelVariant = v.as_str().parse().expect("round trip");
            assert_eq!(parsed, v);
        }
        assert!(matches!(
            "spatial-bogus".parse::<ModelVariant>(),
            Err(ConfigError::UnknownVariant(_))
        ));
    }

    #[test]
    fn variant_switches_follow_the_model_menu() {
        use ModelVariant::*;
        let table = [
            (SpatialMonotone, true, true, true),
            (NonspatialMonotone, false, true, true),
            (SpatialUnconstrained, true, false, true),
            (NonspatialUnconstrained, false, false, true),
            (AdditiveNonlinear, false, false, false),
            (AdditiveLinear, false, false, false),
        ];
        for (v, spatial, monotone, surface) in table {
            assert_eq!(v.spatial(), spatial, "{v}");
            assert_eq!(v.monotone(), monotone, "{v}");
            assert_eq!(v.is_surface(), surface, "{v}");
        }
    }

    #[test]
    fn defaults_match_component_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.m1, 7);
        assert_eq!(cfg.m2, 9);
        assert_eq!(cfg.iterations, 20_000);
        assert_eq!(cfg.burn_in, 10_000);
        assert_eq!(cfg.thin, 10);
        assert_eq!(cfg.grid, 101);
        assert_eq!(cfg.cv_fraction, 0.8);
        assert_eq!(cfg.hyperpriors(), Hyperpriors::default());
    }

    #[test]
    fn file_layering_overrides_defaults_and_flags_override_the_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("run.conf");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# chain settings").unwrap();
        writeln!(f).unwrap();
        writeln!(f, "iterations = 500").unwrap();
        writeln!(f, "variant= nonspatial-monotone").unwrap();
        writeln!(f, "mu_rho =6.5").unwrap();
        drop(f);

        let mut cfg = RunConfig::default();
        cfg.merge_file(&path).expect("merge");
        assert_eq!(cfg.iterations, 500);
        assert_eq!(cfg.variant, ModelVariant::NonspatialMonotone);
        assert_eq!(cfg.mu_rho, 6.5);
        assert_eq!(cfg.m1, 7, "untouched keys keep defaults");

        cfg.apply("iterations", "750").expect("flag override");
        assert_eq!(cfg.iterations, 750);
    }

    #[test]
    fn bad_keys_and_values_are_reported() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply("iterationz", "10"),
            Err(ConfigError::UnknownKey(k)) if k == "iterationz"
        ));
        assert!(matches!(
            cfg.apply("thin", "soon"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            cfg.apply("reference_day", "someday"),
            Err(ConfigError::BadValue { .. })
        ));

        let dir = tempdir().unwrap();
        let path = dir.path().join("broken.conf");
        std::fs::write(&path, "no equals sign here\n").unwrap();
        assert!(matches!(
            cfg.merge_file(&path),
            Err(ConfigError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn chain_settings_follow_the_variant() {
        let cfg = RunConfig::default();
        let spatial = cfg.chain_for(ModelVariant::SpatialMonotone);
        assert!(spatial.spatial && spatial.monotone);
        let additive = cfg.chain_for(ModelVariant::AdditiveLinear);
        assert!(!additive.spatial && !additive.monotone);
        let uncon = cfg.chain_for(ModelVariant::SpatialUnconstrained);
        assert!(uncon.spatial && !uncon.monotone);
    }

    #[test]
    fn weekday_names_parse_in_both_forms() {
        assert_eq!(parse_weekday("Sunday"), Some(Weekday::Sun));
        assert_eq!(parse_weekday("wed"), Some(Weekday::Wed));
        assert_eq!(parse_weekday("notaday"), None);
    }
}
