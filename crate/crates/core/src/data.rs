//! City time-series ingestion, validation, geographic distance, and the
//! synthetic-data generator used throughout the test suite.
//!
//! The on-disk contract is plain CSV: one metadata file
//! (`city_id,lat,lon,region,population`) plus one file per city with columns
//! `date,deaths_u65,deaths_65_74,deaths_75p,ozone,temp,dewpoint`, ISO dates,
//! and empty cells marking missing covariates. Death counts must be present
//! on every row.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use chrono::{Datelike, Duration, NaiveDate};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BernsteinBasis1D, MonotoneCoeffs, SurfaceSpec};
use crate::confounders::running_mean;

pub const AGE_LABELS: [&str; 3] = ["u65", "65_74", "75p"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("{path} line {line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: missing header column {column}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("city {city_id}: latitude {lat} or longitude {lon} out of range")]
    BadCoordinate { city_id: String, lat: f64, lon: f64 },
    #[error("city {city_id}: population must be positive")]
    BadPopulation { city_id: String },
    #[error("metadata lists {city_id} twice")]
    DuplicateCity { city_id: String },
    #[error("no cities found in {path}")]
    NoCities { path: PathBuf },
    #[error("synthetic truth is not monotone in ozone for city {city_id}")]
    NonMonotoneTruth { city_id: String },
    #[error("synthetic spec invalid: {0}")]
    BadSynthSpec(String),
}

/// Static facts about a city: identity, location, region label, and the
/// population that feeds the Poisson offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityMeta {
    pub city_id: String,
    pub lat: f64,
    pub lon: f64,
    pub region: String,
    pub population: u64,
}

/// One calendar day as ingested: counts are mandatory, covariates optional.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDay {
    pub date: NaiveDate,
    /// Deaths for ages under 65, 65-74, and 75 plus, in that order.
    pub deaths: [u64; 3],
    pub ozone: Option<f64>,
    pub temp: Option<f64>,
    pub dewpoint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityData {
    pub meta: CityMeta,
    pub days: Vec<RawDay>,
}

/// A complete-case analysis day: every covariate present, with trailing
/// running means attached.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzedDay {
    pub date: NaiveDate,
    pub ozone: f64,
    pub temp: f64,
    pub dewpoint: f64,
    pub rm_temp: f64,
    pub rm_dew: f64,
    pub deaths: [u64; 3],
}

/// Per-city ingestion bookkeeping reported by `load_cities`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub city_id: String,
    pub rows_read: usize,
    pub missing_ozone: usize,
    pub missing_temp: usize,
    pub missing_dewpoint: usize,
}

fn parse_opt_f64(field: &str, path: &Path, line: u64, name: &str) -> Result<Option<f64>, DataError> {
    let trimmed = field.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    let v: f64 = trimmed.parse().map_err(|_| DataError::Row {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {name} value {trimmed:?}"),
    })?;
    if !v.is_finite() {
        return Err(DataError::Row {
            path: path.to_path_buf(),
            line,
            message: format!("{name} is not finite"),
        });
    }
    Ok(Some(v))
}

fn parse_count(field: &str, path: &Path, line: u64, name: &str) -> Result<u64, DataError> {
    field.trim().parse().map_err(|_| DataError::Row {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {name} count {:?} (must be a nonnegative integer)", field.trim()),
    })
}

const CITY_COLUMNS: [&str; 7] = [
    "date",
    "deaths_u65",
    "deaths_65_74",
    "deaths_75p",
    "ozone",
    "temp",
    "dewpoint",
];

/// Read one city file, enforcing the column layout, strictly increasing
/// dates, and parseable counts. Returns the days plus a missingness report.
pub fn read_city_csv(path: &Path, city_id: &str) -> Result<(Vec<RawDay>, IngestReport), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let mut col = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h.trim().to_string(), i);
    }
    let idx = |name: &str| -> Result<usize, DataError> {
        col.get(name).copied().ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let cols: Vec<usize> = CITY_COLUMNS
        .iter()
        .map(|c| idx(c))
        .collect::<Result<_, _>>()?;

    let mut days = Vec::new();
    let mut report = IngestReport {
        city_id: city_id.to_string(),
        ..Default::default()
    };
    let mut last_date: Option<NaiveDate> = None;
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date_str = record.get(cols[0]).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| DataError::Row {
            path: path.to_path_buf(),
            line,
            message: format!("cannot parse date {date_str:?} (expected YYYY-MM-DD)"),
        })?;
        if let Some(prev) = last_date {
            if date == prev {
                return Err(DataError::Row {
                    path: path.to_path_buf(),
                    line,
                    message: format!("duplicate date {date}"),
                });
            }
            if date < prev {
                return Err(DataError::Row {
                    path: path.to_path_buf(),
                    line,
                    message: format!("dates must increase: {date} after {prev}"),
                });
            }
        }
        last_date = Some(date);
        let deaths = [
            parse_count(record.get(cols[1]).unwrap_or(""), path, line, "deaths_u65")?,
            parse_count(record.get(cols[2]).unwrap_or(""), path, line, "deaths_65_74")?,
            parse_count(record.get(cols[3]).unwrap_or(""), path, line, "deaths_75p")?,
        ];
        let ozone = parse_opt_f64(record.get(cols[4]).unwrap_or(""), path, line, "ozone")?;
        let temp = parse_opt_f64(record.get(cols[5]).unwrap_or(""), path, line, "temp")?;
        let dewpoint = parse_opt_f64(record.get(cols[6]).unwrap_or(""), path, line, "dewpoint")?;
        report.rows_read += 1;
        report.missing_ozone += usize::from(ozone.is_none());
        report.missing_temp += usize::from(temp.is_none());
        report.missing_dewpoint += usize::from(dewpoint.is_none());
        days.push(RawDay {
            date,
            deaths,
            ozone,
            temp,
            dewpoint,
        });
    }
    Ok((days, report))
}

/// Read `metadata.csv` plus one `{city_id}.csv` per listed city from `dir`.
/// Cities come back sorted by id regardless of metadata order.
pub fn load_cities(dir: &Path) -> Result<(Vec<CityData>, Vec<IngestReport>), DataError> {
    let meta_path = dir.join("metadata.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&meta_path)
        .map_err(|source| DataError::Csv {
            path: meta_path.clone(),
            source,
        })?;
    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: meta_path.clone(),
            source,
        })?
        .clone();
    let mut col = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        col.insert(h.trim().to_string(), i);
    }
    for want in ["city_id", "lat", "lon", "region", "population"] {
        if !col.contains_key(want) {
            return Err(DataError::MissingColumn {
                path: meta_path.clone(),
                column: want.to_string(),
            });
        }
    }
    let mut metas: BTreeMap<String, CityMeta> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: meta_path.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let get = |name: &str| record.get(col[name]).unwrap_or("").trim().to_string();
        let city_id = get("city_id");
        if city_id.is_empty() {
            return Err(DataError::Row {
                path: meta_path.clone(),
                line,
                message: "empty city_id".to_string(),
            });
        }
        let lat: f64 = get("lat").parse().map_err(|_| DataError::Row {
            path: meta_path.clone(),
            line,
            message: format!("cannot parse lat {:?}", get("lat")),
        })?;
        let lon: f64 = get("lon").parse().map_err(|_| DataError::Row {
            path: meta_path.clone(),
            line,
            message: format!("cannot parse lon {:?}", get("lon")),
        })?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(DataError::BadCoordinate { city_id, lat, lon });
        }
        let population: u64 = get("population").parse().map_err(|_| DataError::Row {
            path: meta_path.clone(),
            line,
            message: format!("cannot parse population {:?}", get("population")),
        })?;
        if population == 0 {
            return Err(DataError::BadPopulation { city_id });
        }
        let meta = CityMeta {
            city_id: city_id.clone(),
            lat,
            lon,
            region: get("region"),
            population,
        };
        if metas.insert(city_id.clone(), meta).is_some() {
            return Err(DataError::DuplicateCity { city_id });
        }
    }
    if metas.is_empty() {
        return Err(DataError::NoCities { path: meta_path });
    }
    let mut cities = Vec::with_capacity(metas.len());
    let mut reports = Vec::with_capacity(metas.len());
    for (city_id, meta) in metas {
        let path = dir.join(format!("{city_id}.csv"));
        let (days, report) = read_city_csv(&path, &city_id)?;
        cities.push(CityData { meta, days });
        reports.push(report);
    }
    Ok((cities, reports))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write one city's day records in the ingestion column layout.
pub fn write_city_csv(path: &Path, city: &CityData) -> Result<(), DataError> {
    let mut out = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(out, "{}", CITY_COLUMNS.join(",")).map_err(io_err)?;
    for d in &city.days {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d.date,
            d.deaths[0],
            d.deaths[1],
            d.deaths[2],
            fmt_opt(d.ozone),
            fmt_opt(d.temp),
            fmt_opt(d.dewpoint)
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Write the metadata file for a set of cities.
pub fn write_metadata_csv(path: &Path, metas: &[CityMeta]) -> Result<(), DataError> {
    let mut out = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    writeln!(out, "city_id,lat,lon,region,population").map_err(io_err)?;
    for m in metas {
        writeln!(
            out,
            "{},{},{},{},{}",
            m.city_id, m.lat, m.lon, m.region, m.population
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// True for April through October, the ozone season.
pub fn in_ozone_season(date: NaiveDate) -> bool {
    (4..=10).contains(&date.month())
}

/// Drop days outside April 1 to October 31. Idempotent.
pub fn ozone_season_filter(city: &CityData) -> CityData {
    CityData {
        meta: city.meta.clone(),
        days: city
            .days
            .iter()
            .filter(|d| in_ozone_season(d.date))
            .cloned()
            .collect(),
    }
}

/// Attach trailing running means (computed on the contiguous calendar grid,
/// so gaps in the record count as missing days) and keep complete cases.
pub fn analyzed_days(
    city: &CityData,
    rm_temp_window: usize,
    rm_dew_window: usize,
) -> Vec<AnalyzedDay> {
    if city.days.is_empty() {
        return Vec::new();
    }
    let first = city.days.first().unwrap().date;
    let last = city.days.last().unwrap().date;
    let span = (last - first).num_days() as usize + 1;
    let mut slot: Vec<Option<usize>> = vec![None; span];
    for (i, d) in city.days.iter().enumerate() {
        slot[(d.date - first).num_days() as usize] = Some(i);
    }
    let grid_temp: Vec<Option<f64>> = slot
        .iter()
        .map(|s| s.and_then(|i| city.days[i].temp))
        .collect();
    let grid_dew: Vec<Option<f64>> = slot
        .iter()
        .map(|s| s.and_then(|i| city.days[i].dewpoint))
        .collect();
    let rm_temp = running_mean(&grid_temp, rm_temp_window).expect("window validated by config");
    let rm_dew = running_mean(&grid_dew, rm_dew_window).expect("window validated by config");

    let mut out = Vec::new();
    for (g, s) in slot.iter().enumerate() {
        let Some(i) = *s else { continue };
        let d = &city.days[i];
        let (Some(ozone), Some(temp), Some(dewpoint)) = (d.ozone, d.temp, d.dewpoint) else {
            continue;
        };
        let (Some(rmt), Some(rmd)) = (rm_temp[g], rm_dew[g]) else {
            continue;
        };
        out.push(AnalyzedDay {
            date: d.date,
            ozone,
            temp,
            dewpoint,
            rm_temp: rmt,
            rm_dew: rmd,
            deaths: d.deaths,
        });
    }
    out
}

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Haversine great-circle distance in kilometers.
pub fn great_circle_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Shape of the true log-relative-rate surface used by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TruthFamily {
    /// Linear in ozone plus a temperature curve; no interaction.
    AdditiveLinear,
    /// Quadratic in ozone plus a temperature curve; no interaction.
    AdditiveNonlinear,
    /// Quadratic in ozone with a synergistic high-ozone high-temperature term.
    Interaction,
}

impl TruthFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            TruthFamily::AdditiveLinear => "additive_linear",
            TruthFamily::AdditiveNonlinear => "additive_nonlinear",
            TruthFamily::Interaction => "interaction",
        }
    }
}

/// Generator settings. Effect sizes are on the log-rate scale over the unit
/// square of the (ozone, temperature) domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_cities: usize,
    pub days_per_city: usize,
    pub family: TruthFamily,
    pub seed: u64,
    /// Log-rate rise across the full ozone range (linear or quadratic shape).
    pub ozone_effect: f64,
    /// Curvature of the temperature main effect.
    pub temp_curvature: f64,
    /// Size of the interaction corner term (Interaction family only).
    pub interaction_effect: f64,
    /// Standard deviation of the per-city log perturbation of the surface.
    pub perturb_sd: f64,
    /// Scales every confounder signal; 0 turns confounding off.
    pub confounder_scale: f64,
    /// Probability that each covariate value is dropped.
    pub missing_rate: f64,
    /// First simulated day (clamped into the ozone season).
    pub start_year: i32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_cities: 4,
            days_per_city: 1000,
            family: TruthFamily::Interaction,
            seed: 0,
            ozone_effect: 0.15,
            temp_curvature: 0.5,
            interaction_effect: 0.12,
            perturb_sd: 0.08,
            confounder_scale: 1.0,
            missing_rate: 0.0,
            start_year: 1990,
        }
    }
}

pub const SYNTH_OZONE_RANGE: (f64, f64) = (0.0, 120.0);
pub const SYNTH_TEMP_RANGE: (f64, f64) = (40.0, 100.0);

/// Confounder signal parameters baked into one synthetic city.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfounderTruth {
    pub dow: [f64; 7],
    pub season_amplitude: f64,
    pub trend: f64,
    pub dew_coef: f64,
    pub rm_temp_coef: f64,
    pub rm_dew_coef: f64,
    pub age_log_rates: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CityTruth {
    pub city_id: String,
    pub surface: SurfaceSpec,
    pub confounders: ConfounderTruth,
}

/// Everything needed to score a fit against the generator: the per-city true
/// surfaces and the settings that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    pub spec: SynthSpec,
    pub cities: Vec<CityTruth>,
}

/// Coefficients of the monomial u^power on the degree-2 Bernstein basis.
fn monomial_bern2(power: usize) -> [f64; 3] {
    match power {
        0 => [1.0, 1.0, 1.0],
        1 => [0.0, 0.5, 1.0],
        2 => [0.0, 0.0, 1.0],
        _ => unreachable!("generator truths are at most quadratic"),
    }
}

/// Base truth surface on the degree (2, 2) tensor basis, before per-city
/// perturbation. Written in unit coordinates u1 (ozone), u2 (temperature).
fn base_truth_psi(spec: &SynthSpec) -> Vec<f64> {
    let lin = monomial_bern2(1);
    let quad = monomial_bern2(2);
    let constant = monomial_bern2(0);
    // temperature curve t(u2) = c * (u2 - 0.4)^2
    let mut tcurve = [0.0; 3];
    for k in 0..3 {
        tcurve[k] = spec.temp_curvature * (quad[k] - 0.8 * lin[k] + 0.16 * constant[k]);
    }
    let ozone_shape = match spec.family {
        TruthFamily::AdditiveLinear => lin,
        _ => quad,
    };
    let mut psi = vec![0.0; 9];
    for k in 0..3 {
        for j in 0..3 {
            let mut v = spec.ozone_effect * ozone_shape[j] + tcurve[k];
            if spec.family == TruthFamily::Interaction {
                v += spec.interaction_effect * quad[j] * quad[k];
            }
            psi[k * 3 + j] = v;
        }
    }
    psi
}

fn weekday_index(date: NaiveDate) -> usize {
    date.weekday().num_days_from_sunday() as usize
}

/// All ozone-season dates starting April 1 of `start_year`, in order.
fn season_dates(start_year: i32, n: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n);
    let mut d = NaiveDate::from_ymd_opt(start_year, 4, 1).expect("valid date");
    while dates.len() < n {
        if in_ozone_season(d) {
            dates.push(d);
        }
        d += Duration::days(1);
    }
    dates
}

struct Weather {
    ozone: f64,
    temp: f64,
    dewpoint: f64,
}

fn seasonal_temp(date: NaiveDate) -> f64 {
    let doy = date.ordinal() as f64;
    68.0 + 16.0 * (std::f64::consts::TAU * (doy - 120.0) / 365.0).sin()
}

fn simulate_weather<R: Rng>(dates: &[NaiveDate], rng: &mut R) -> Vec<Weather> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(dates.len());
    let mut temp_dev = 0.0f64;
    let mut prev: Option<NaiveDate> = None;
    for &date in dates {
        let contiguous = prev.map(|p| (date - p).num_days() == 1).unwrap_or(false);
        if !contiguous {
            temp_dev = 0.0;
        }
        temp_dev = 0.7 * temp_dev + 5.0 * noise.sample(rng);
        let temp = (seasonal_temp(date) + temp_dev).clamp(SYNTH_TEMP_RANGE.0, SYNTH_TEMP_RANGE.1);
        let ozone = (4.0 + 0.8 * (temp - 40.0) + 10.0 * noise.sample(rng))
            .clamp(SYNTH_OZONE_RANGE.0, SYNTH_OZONE_RANGE.1);
        let dewpoint = (temp - 12.0 + 5.0 * noise.sample(rng)).clamp(20.0, 95.0);
        out.push(Weather {
            ozone,
            temp,
            dewpoint,
        });
        prev = Some(date);
    }
    out
}

/// Generate synthetic cities and the ground truth that produced them.
/// Deterministic in `spec.seed`; cities draw from independent substreams.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Vec<CityData>, SynthTruth), DataError> {
    if spec.n_cities == 0 || spec.days_per_city == 0 {
        return Err(DataError::BadSynthSpec(
            "need at least one city and one day".to_string(),
        ));
    }
    if !(0.0..1.0).contains(&spec.missing_rate) {
        return Err(DataError::BadSynthSpec(format!(
            "missing_rate {} must be in [0, 1)",
            spec.missing_rate
        )));
    }
    let base_psi = base_truth_psi(spec);
    let ozb = BernsteinBasis1D::new(
        "ozone",
        2,
        SYNTH_OZONE_RANGE.0,
        SYNTH_OZONE_RANGE.1 - SYNTH_OZONE_RANGE.0,
    )
    .expect("fixed generator ranges");
    let tmb = BernsteinBasis1D::new(
        "temp",
        2,
        SYNTH_TEMP_RANGE.0,
        SYNTH_TEMP_RANGE.1 - SYNTH_TEMP_RANGE.0,
    )
    .expect("fixed generator ranges");

    let mut cities = Vec::with_capacity(spec.n_cities);
    let mut truths = Vec::with_capacity(spec.n_cities);
    for c in 0..spec.n_cities {
        let city_id = format!("city{c:03}");
        let mut rng = crate::math::derive_rng(spec.seed, &format!("synth-{city_id}"));
        let noise = Normal::new(0.0, 1.0).unwrap();

        // perturb the shared surface in the difference parameterization so
        // each city's truth stays monotone
        let base = MonotoneCoeffs::from_psi(2, 2, &base_psi);
        let mut theta = base.theta.clone();
        for (i, t) in theta.iter_mut().enumerate() {
            let e: f64 = noise.sample(&mut rng);
            if crate::basis::is_difference_coord(i, 2) {
                *t *= (spec.perturb_sd * e).exp();
            } else {
                *t += 0.25 * spec.perturb_sd * e;
            }
        }
        let perturbed = MonotoneCoeffs {
            m1: 2,
            m2: 2,
            theta,
        };
        for (i, t) in perturbed.theta.iter().enumerate() {
            if crate::basis::is_difference_coord(i, 2) && *t < 0.0 {
                return Err(DataError::NonMonotoneTruth { city_id });
            }
        }
        let surface = SurfaceSpec {
            ozone_basis: ozb.clone(),
            temp_basis: tmb.clone(),
            coeffs: perturbed.to_psi(),
        };

        let meta = CityMeta {
            city_id: city_id.clone(),
            lat: 36.0 + 2.0 * (c / 4) as f64 + 0.3 * (c % 3) as f64,
            lon: -95.0 + 2.5 * (c % 4) as f64 + 0.2 * (c % 5) as f64,
            region: if c % 4 < 2 { "east" } else { "west" }.to_string(),
            population: 600_000 + 250_000 * (c as u64 % 5),
        };

        let s = spec.confounder_scale;
        let conf = ConfounderTruth {
            dow: [0.0, 0.01, -0.01, 0.02, 0.0, -0.02, 0.015].map(|v| v * s),
            season_amplitude: 0.05 * s,
            trend: 0.04 * s,
            dew_coef: 0.03 * s,
            rm_temp_coef: 0.02 * s,
            rm_dew_coef: 0.02 * s,
            // baseline daily rates per person by age group
            age_log_rates: [
                (9.0 / meta.population as f64).ln(),
                (12.0 / meta.population as f64).ln(),
                (20.0 / meta.population as f64).ln(),
            ],
        };

        let dates = season_dates(spec.start_year, spec.days_per_city);
        let weather = simulate_weather(&dates, &mut rng);

        // running means on the generated (gap-aware) series, for the
        // confounder signal only; the ingested file carries raw values
        let grid_first = dates[0];
        let span = (dates[spec.days_per_city - 1] - grid_first).num_days() as usize + 1;
        let mut grid_temp = vec![None; span];
        let mut grid_dew = vec![None; span];
        for (i, &date) in dates.iter().enumerate() {
            let g = (date - grid_first).num_days() as usize;
            grid_temp[g] = Some(weather[i].temp);
            grid_dew[g] = Some(weather[i].dewpoint);
        }
        let rm_temp = running_mean(&grid_temp, 3).expect("window 3");
        let rm_dew = running_mean(&grid_dew, 3).expect("window 3");

        let n = spec.days_per_city as f64;
        let mut days = Vec::with_capacity(spec.days_per_city);
        for (i, &date) in dates.iter().enumerate() {
            let w = &weather[i];
            let g = (date - grid_first).num_days() as usize;
            let rmt = rm_temp[g].expect("generated day present");
            let rmd = rm_dew[g].expect("generated day present");
            let doy = date.ordinal() as f64;
            let conf_term = conf.dow[weekday_index(date)]
                + conf.season_amplitude * (std::f64::consts::TAU * doy / 365.0).sin()
                + conf.trend * (i as f64 / n)
                + conf.dew_coef * ((w.dewpoint - 55.0) / 15.0).powi(2)
                + conf.rm_temp_coef * ((rmt - 68.0) / 12.0).powi(2)
                + conf.rm_dew_coef * ((rmd - 55.0) / 15.0).powi(2);
            let f = surface
                .eval_surface(w.ozone, w.temp)
                .expect("weather clamped into basis domain");
            let mut deaths = [0u64; 3];
            for (a, d) in deaths.iter_mut().enumerate() {
                let log_mu = (meta.population as f64).ln() + conf.age_log_rates[a] + f + conf_term;
                *d = Poisson::new(log_mu.exp())
                    .expect("positive mean")
                    .sample(&mut rng) as u64;
            }
            let mut keep = |v: f64| -> Option<f64> {
                if spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate {
                    None
                } else {
                    Some(v)
                }
            };
            days.push(RawDay {
                date,
                deaths,
                ozone: keep(w.ozone),
                temp: keep(w.temp),
                dewpoint: keep(w.dewpoint),
            });
        }
        cities.push(CityData { meta, days });
        truths.push(CityTruth {
            city_id,
            surface,
            confounders: conf,
        });
    }
    Ok((
        cities,
        SynthTruth {
            spec: spec.clone(),
            cities: truths,
        },
    ))
}

/// Write a synthetic dataset in the ingestion layout plus a ground-truth
/// sidecar (`ground_truth.json`).
pub fn write_synthetic_dataset(
    dir: &Path,
    cities: &[CityData],
    truth: &SynthTruth,
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let metas: Vec<CityMeta> = cities.iter().map(|c| c.meta.clone()).collect();
    write_metadata_csv(&dir.join("metadata.csv"), &metas)?;
    for city in cities {
        write_city_csv(&dir.join(format!("{}.csv", city.meta.city_id)), city)?;
    }
    let truth_path = dir.join("ground_truth.json");
    let file = std::fs::File::create(&truth_path).map_err(|source| DataError::Io {
        path: truth_path.clone(),
        source,
    })?;
    serde_json::to_writer_pretty(file, truth).map_err(|e| DataError::Io {
        path: truth_path,
        source: std::io::Error::other(e),
    })?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<SynthTruth, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(file).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Sample correlation, used by generator checks and reports.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Deaths across the day list as a response vector in age-major order:
/// all days for the first age group, then the second, then the third.
pub fn stacked_response(days: &[AnalyzedDay]) -> DVector<f64> {
    let n = days.len();
    let mut y = DVector::<f64>::zeros(3 * n);
    for (a, _) in AGE_LABELS.iter().enumerate() {
        for (t, d) in days.iter().enumerate() {
            y[a * n + t] = d.deaths[a] as f64;
        }
    }
    y
}
