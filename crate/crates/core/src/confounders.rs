//! Confounder design for the per-city count regressions: age-group
//! intercepts, day-of-week dummies, per-age natural cubic splines of
//! calendar time, and natural cubic splines of smoothed weather covariates.
//!
//! Spline bases are built from one set of rows (the training days) and can
//! be re-evaluated on other days, which is what holdout prediction needs;
//! beyond the boundary knots every column continues linearly.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AnalyzedDay;

pub const AGE_GROUPS: [&str; 3] = ["u65", "65_74", "75p"];

#[derive(Debug, Error)]
pub enum ConfounderError {
    #[error("natural spline of {var} needs at least {need} distinct values, got {got}")]
    TooFewDistinct { var: String, need: usize, got: usize },
    #[error("natural spline df must be >= 1, got {df} for {var}")]
    BadDf { var: String, df: usize },
    #[error("duplicate spline knots for {var}: quantiles of the data collapse at {value}")]
    DuplicateKnots { var: String, value: f64 },
    #[error("running mean window must be >= 1")]
    BadWindow,
    #[error("no days provided to the confounder design")]
    NoDays,
    #[error("confounder design is rank deficient: {0} aliased column(s)")]
    RankDeficient(usize),
}

/// Degrees of freedom and smoothing windows for the confounder model.
/// Defaults: 3-day trailing windows; 7 time df per year of data (minimum 7)
/// per age group; 6 df for running-mean temperature; 3 df each for dewpoint
/// and running-mean dewpoint; Sunday as the day-of-week reference. Same-day
/// temperature (6 df) enters only for the additive model variants, where the
/// risk function no longer carries temperature.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfounderConfig {
    pub rm_temp_window: usize,
    pub rm_dew_window: usize,
    pub time_df_per_year: f64,
    pub min_time_df: usize,
    pub rm_temp_df: usize,
    pub dew_df: usize,
    pub rm_dew_df: usize,
    pub same_day_temp_df: usize,
    pub include_same_day_temp: bool,
    #[serde(with = "weekday_serde")]
    pub reference_day: Weekday,
}

impl Default for ConfounderConfig {
    fn default() -> Self {
        Self {
            rm_temp_window: 3,
            rm_dew_window: 3,
            time_df_per_year: 7.0,
            min_time_df: 7,
            rm_temp_df: 6,
            dew_df: 3,
            rm_dew_df: 3,
            same_day_temp_df: 6,
            include_same_day_temp: false,
            reference_day: Weekday::Sun,
        }
    }
}

mod weekday_serde {
    use chrono::Weekday;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::str::FromStr;

    pub fn serialize<S: Serializer>(d: &Weekday, s: S) -> Result<S::Ok, S::Error> {
        d.to_string().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Weekday, D::Error> {
        let text = String::deserialize(d)?;
        Weekday::from_str(&text).map_err(serde::de::Error::custom)
    }
}

/// Trailing running mean over the previous `window` entries including the
/// current one. Partial windows at the start average what exists; missing
/// entries are skipped; the result is missing only when the whole window is.
pub fn running_mean(x: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>, ConfounderError> {
    if window == 0 {
        return Err(ConfounderError::BadWindow);
    }
    let mut out = Vec::with_capacity(x.len());
    for t in 0..x.len() {
        let start = t + 1 - window.min(t + 1);
        let mut sum = 0.0;
        let mut n = 0usize;
        for v in x[start..=t].iter().flatten() {
            sum += v;
            n += 1;
        }
        out.push(if n > 0 { Some(sum / n as f64) } else { None });
    }
    Ok(out)
}

/// Natural cubic spline basis treated as a reusable object: knots plus the
/// second derivatives of each cardinal interpolant (value 1 at one knot,
/// 0 at the others, natural boundary conditions). The first cardinal column
/// is dropped so the basis excludes constants; with df columns over df + 1
/// knots the span plus an intercept is the full natural spline space.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NaturalSplineBasis {
    pub var: String,
    pub knots: Vec<f64>,
    /// sec[j][i] = second derivative of cardinal j at knot i.
    sec: Vec<Vec<f64>>,
}

impl NaturalSplineBasis {
    /// Basis with df columns: boundary knots at min/max of `values` and
    /// df - 1 interior knots at equally spaced quantiles.
    pub fn from_data(var: &str, values: &[f64], df: usize) -> Result<Self, ConfounderError> {
        if df == 0 {
            return Err(ConfounderError::BadDf {
                var: var.to_string(),
                df,
            });
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite spline input"));
        sorted.dedup();
        if sorted.len() < df + 1 {
            return Err(ConfounderError::TooFewDistinct {
                var: var.to_string(),
                need: df + 1,
                got: sorted.len(),
            });
        }
        let mut knots = Vec::with_capacity(df + 1);
        knots.push(sorted[0]);
        for i in 1..df {
            let p = i as f64 / df as f64;
            knots.push(crate::math::quantile_sorted(&sorted, p).expect("valid quantile"));
        }
        knots.push(*sorted.last().expect("nonempty"));
        for w in knots.windows(2) {
            if w[1] <= w[0] {
                return Err(ConfounderError::DuplicateKnots {
                    var: var.to_string(),
                    value: w[0],
                });
            }
        }
        Ok(Self::from_knots(var, knots))
    }

    fn from_knots(var: &str, knots: Vec<f64>) -> Self {
        let k = knots.len();
        let mut sec = Vec::with_capacity(k);
        for j in 0..k {
            let mut y = vec![0.0; k];
            y[j] = 1.0;
            sec.push(natural_second_derivatives(&knots, &y));
        }
        Self {
            var: var.to_string(),
            knots,
            sec,
        }
    }

    pub fn df(&self) -> usize {
        self.knots.len() - 1
    }

    /// All df column values at x, linear beyond the boundary knots.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let k = self.knots.len();
        let mut row = vec![0.0; k];
        if x <= self.knots[0] {
            let h = self.knots[1] - self.knots[0];
            let dx = x - self.knots[0];
            row[0] += 1.0 - dx / h;
            row[1] += dx / h;
            for (j, s) in self.sec.iter().enumerate() {
                row[j] -= dx * h * s[1] / 6.0;
            }
        } else if x >= self.knots[k - 1] {
            let h = self.knots[k - 1] - self.knots[k - 2];
            let dx = x - self.knots[k - 1];
            row[k - 1] += 1.0 + dx / h;
            row[k - 2] -= dx / h;
            for (j, s) in self.sec.iter().enumerate() {
                row[j] += dx * h * s[k - 2] / 6.0;
            }
        } else {
            let i = match self
                .knots
                .binary_search_by(|t| t.partial_cmp(&x).expect("finite knots"))
            {
                Ok(exact) => exact.min(k - 2),
                Err(ins) => ins - 1,
            };
            let h = self.knots[i + 1] - self.knots[i];
            let a = (self.knots[i + 1] - x) / h;
            let b = (x - self.knots[i]) / h;
            let ca = (a * a * a - a) * h * h / 6.0;
            let cb = (b * b * b - b) * h * h / 6.0;
            row[i] += a;
            row[i + 1] += b;
            for (j, s) in self.sec.iter().enumerate() {
                row[j] += ca * s[i] + cb * s[i + 1];
            }
        }
        // constant excluded: drop the first cardinal
        row.remove(0);
        row
    }
}

/// Second derivatives of the natural cubic interpolant through (knots, y):
/// tridiagonal system solved by the Thomas algorithm, endpoints pinned at 0.
fn natural_second_derivatives(knots: &[f64], y: &[f64]) -> Vec<f64> {
    let k = knots.len();
    let mut m = vec![0.0; k];
    if k < 3 {
        return m;
    }
    let n = k - 2;
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let h0 = knots[i + 1] - knots[i];
        let h1 = knots[i + 2] - knots[i + 1];
        diag[i] = 2.0 * (h0 + h1);
        upper[i] = h1;
        rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
    }
    // forward sweep; the lower band entry for row i is h_i = upper[i-1]... no:
    // lower[i] = knots[i+1]-knots[i] = h0 of row i, equal to upper[i-1] by
    // construction of consecutive intervals.
    for i in 1..n {
        let lower = knots[i + 1] - knots[i];
        let w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    m[n] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
    }
    m
}

/// Free-function form: spline design matrix of `df` columns at the data
/// points themselves.
pub fn natural_cubic_spline_basis(
    x: &[f64],
    df: usize,
) -> Result<DMatrix<f64>, ConfounderError> {
    let basis = NaturalSplineBasis::from_data("x", x, df)?;
    let mut m = DMatrix::<f64>::zeros(x.len(), df);
    for (r, &v) in x.iter().enumerate() {
        for (c, b) in basis.eval(v).into_iter().enumerate() {
            m[(r, c)] = b;
        }
    }
    Ok(m)
}

/// Assembled confounder design.
#[derive(Debug, Clone)]
pub struct ConfounderDesign {
    /// Rows are day-by-age-group, age-major: all days for under-65, then
    /// 65-74, then 75+, matching the stacked response and offset.
    pub matrix: DMatrix<f64>,
    pub column_labels: Vec<String>,
    /// (term name, number of columns) in column order.
    pub df_map: Vec<(String, usize)>,
}

/// Everything needed to rebuild the design on new days: spline knots are
/// fitted once (on training days) and reused for holdout evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfounderPlan {
    pub config: ConfounderConfig,
    pub time_origin: NaiveDate,
    pub time_df: usize,
    pub time_basis: NaturalSplineBasis,
    pub rm_temp_basis: NaturalSplineBasis,
    pub dew_basis: NaturalSplineBasis,
    pub rm_dew_basis: NaturalSplineBasis,
    pub same_day_temp_basis: Option<NaturalSplineBasis>,
}

fn day_offset(origin: NaiveDate, d: NaiveDate) -> f64 {
    (d - origin).num_days() as f64
}

impl ConfounderPlan {
    /// Fit spline knots to the given days. Time df is
    /// round(time_df_per_year x study years), floored at min_time_df. A study
    /// year is a distinct calendar year with data, so a season-filtered year
    /// still counts as one full year.
    pub fn build(days: &[AnalyzedDay], config: &ConfounderConfig) -> Result<Self, ConfounderError> {
        if days.is_empty() {
            return Err(ConfounderError::NoDays);
        }
        let origin = days[0].date;
        let years: std::collections::BTreeSet<i32> =
            days.iter().map(|d| d.date.year()).collect();
        let time_df = ((config.time_df_per_year * years.len() as f64).round() as usize)
            .max(config.min_time_df);
        let times: Vec<f64> = days.iter().map(|d| day_offset(origin, d.date)).collect();
        let rm_temps: Vec<f64> = days.iter().map(|d| d.rm_temp).collect();
        let dews: Vec<f64> = days.iter().map(|d| d.dewpoint).collect();
        let rm_dews: Vec<f64> = days.iter().map(|d| d.rm_dew).collect();
        let same_day_temp_basis = if config.include_same_day_temp {
            let temps: Vec<f64> = days.iter().map(|d| d.temp).collect();
            Some(NaturalSplineBasis::from_data(
                "temperature",
                &temps,
                config.same_day_temp_df,
            )?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            time_origin: origin,
            time_df,
            time_basis: NaturalSplineBasis::from_data("time", &times, time_df)?,
            rm_temp_basis: NaturalSplineBasis::from_data(
                "running-mean temperature",
                &rm_temps,
                config.rm_temp_df,
            )?,
            dew_basis: NaturalSplineBasis::from_data("dewpoint", &dews, config.dew_df)?,
            rm_dew_basis: NaturalSplineBasis::from_data(
                "running-mean dewpoint",
                &rm_dews,
                config.rm_dew_df,
            )?,
            same_day_temp_basis,
        })
    }

    fn dow_columns(&self) -> Vec<Weekday> {
        let mut order = vec![
            Weekday::Sun,
            Weekday::Mon,
            Weekday::Tue,
            Weekday::Wed,
            Weekday::Thu,
            Weekday::Fri,
            Weekday::Sat,
        ];
        order.retain(|d| *d != self.config.reference_day);
        order
    }

    /// Evaluate the design on `days` (each replicated across the three age
    /// groups, age-major).
    pub fn evaluate(&self, days: &[AnalyzedDay]) -> Result<ConfounderDesign, ConfounderError> {
        if days.is_empty() {
            return Err(ConfounderError::NoDays);
        }
        let n = days.len();
        let dows = self.dow_columns();
        let mut labels: Vec<String> = Vec::new();
        let mut df_map: Vec<(String, usize)> = Vec::new();
        for age in AGE_GROUPS {
            labels.push(format!("age_{age}"));
        }
        df_map.push(("age intercepts".into(), 3));
        for d in &dows {
            labels.push(format!("dow_{d}"));
        }
        df_map.push(("day of week".into(), dows.len()));
        for age in AGE_GROUPS {
            for i in 1..=self.time_df {
                labels.push(format!("time_{age}_{i}"));
            }
            df_map.push((format!("time spline ({age})"), self.time_df));
        }
        for i in 1..=self.rm_temp_basis.df() {
            labels.push(format!("rmtemp_{i}"));
        }
        df_map.push(("running-mean temperature spline".into(), self.rm_temp_basis.df()));
        for i in 1..=self.dew_basis.df() {
            labels.push(format!("dew_{i}"));
        }
        df_map.push(("dewpoint spline".into(), self.dew_basis.df()));
        for i in 1..=self.rm_dew_basis.df() {
            labels.push(format!("rmdew_{i}"));
        }
        df_map.push(("running-mean dewpoint spline".into(), self.rm_dew_basis.df()));
        if let Some(b) = &self.same_day_temp_basis {
            for i in 1..=b.df() {
                labels.push(format!("temp_{i}"));
            }
            df_map.push(("same-day temperature spline".into(), b.df()));
        }

        let p = labels.len();
        let mut m = DMatrix::<f64>::zeros(3 * n, p);
        // per-day column values shared across age groups
        let mut shared = DMatrix::<f64>::zeros(n, p);
        let mut time_rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (r, day) in days.iter().enumerate() {
            let mut c = 3 + dows.len() + 3 * self.time_df;
            if let Some(pos) = dows.iter().position(|d| *d == day.date.weekday()) {
                shared[(r, 3 + pos)] = 1.0;
            }
            time_rows.push(self.time_basis.eval(day_offset(self.time_origin, day.date)));
            for v in self.rm_temp_basis.eval(day.rm_temp) {
                shared[(r, c)] = v;
                c += 1;
            }
            for v in self.dew_basis.eval(day.dewpoint) {
                shared[(r, c)] = v;
                c += 1;
            }
            for v in self.rm_dew_basis.eval(day.rm_dew) {
                shared[(r, c)] = v;
                c += 1;
            }
            if let Some(b) = &self.same_day_temp_basis {
                for v in b.eval(day.temp) {
                    shared[(r, c)] = v;
                    c += 1;
                }
            }
        }
        for age in 0..3 {
            for r in 0..n {
                let row = age * n + r;
                m[(row, age)] = 1.0;
                let tcol = 3 + dows.len() + age * self.time_df;
                for (i, v) in time_rows[r].iter().enumerate() {
                    m[(row, tcol + i)] = *v;
                }
                for c in 3..p {
                    if !(3 + dows.len()..3 + dows.len() + 3 * self.time_df).contains(&c) {
                        m[(row, c)] = shared[(r, c)];
                    }
                }
            }
        }
        Ok(ConfounderDesign {
            matrix: m,
            column_labels: labels,
            df_map,
        })
    }
}

/// Build the design for one city's analyzed days (knots fitted to the same
/// days) and verify full column rank by rank-revealing QR.
pub fn build_confounder_design(
    days: &[AnalyzedDay],
    config: &ConfounderConfig,
) -> Result<ConfounderDesign, ConfounderError> {
    let plan = ConfounderPlan::build(days, config)?;
    let design = plan.evaluate(days)?;
    let aliased = crate::glm::aliased_columns(&design.matrix);
    if !aliased.is_empty() {
        return Err(ConfounderError::RankDeficient(aliased.len()));
    }
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnalyzedDay;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).expect("valid date")
    }

    #[test]
    fn running_mean_trailing_window() {
        let x: Vec<Option<f64>> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| Some(*v)).collect();
        let got = running_mean(&x, 3).unwrap();
        let want = [1.0, 1.5, 2.0, 3.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g.unwrap() - w).abs() < 1e-15);
        }
    }

    #[test]
    fn running_mean_skips_missing() {
        let x = vec![Some(2.0), None, Some(4.0), None, None, None];
        let got = running_mean(&x, 3).unwrap();
        assert_eq!(got[0], Some(2.0));
        assert_eq!(got[1], Some(2.0));
        assert_eq!(got[2], Some(3.0)); // mean of 2 and 4
        assert_eq!(got[3], Some(4.0));
        assert_eq!(got[4], Some(4.0));
        assert_eq!(got[5], None); // window entirely missing
    }

    #[test]
    fn spline_df1_is_affine_in_x() {
        let x: Vec<f64> = (0..50).map(|i| 3.0 + 0.7 * i as f64).collect();
        let m = natural_cubic_spline_basis(&x, 1).unwrap();
        // column must equal (x - x0) / (x_end - x0)
        for (r, &v) in x.iter().enumerate() {
            let want = (v - x[0]) / (x[49] - x[0]);
            assert!((m[(r, 0)] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_second_derivative_vanishes_at_boundaries() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 37.0) % 101.0).collect();
        let basis = NaturalSplineBasis::from_data("x", &x, 5).unwrap();
        let lo = *basis.knots.first().unwrap();
        let hi = *basis.knots.last().unwrap();
        let h = (hi - lo) * 1e-4;
        // one-sided stencils estimate f'' just inside each boundary; the
        // estimator itself carries an O(h f''') remainder, so compare the
        // boundary curvature against the interior curvature of each column
        let fd2 = |t: f64, c: usize| {
            let f0 = basis.eval(t);
            let f1 = basis.eval(t + h);
            let f2 = basis.eval(t + 2.0 * h);
            (f2[c] - 2.0 * f1[c] + f0[c]) / (h * h)
        };
        for c in 0..basis.df() {
            let mut interior: f64 = 0.0;
            for i in 1..40 {
                let t = lo + (hi - lo) * i as f64 / 40.0;
                interior = interior.max(fd2(t, c).abs());
            }
            let at_lo = fd2(lo, c).abs();
            let at_hi = fd2(hi - 2.0 * h, c).abs();
            assert!(
                at_lo < 1e-2 * interior && at_hi < 1e-2 * interior,
                "column {c}: boundary d2 {at_lo}/{at_hi} vs interior {interior}"
            );
        }
    }

    #[test]
    fn spline_extrapolates_linearly() {
        let x: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let basis = NaturalSplineBasis::from_data("x", &x, 4).unwrap();
        for c in 0..4 {
            let f = |t: f64| basis.eval(t)[c];
            let d1 = f(61.0) - f(60.0);
            let d2 = f(62.0) - f(61.0);
            assert!((d1 - d2).abs() < 1e-10);
            let e1 = f(-1.0) - f(-2.0);
            let e2 = f(0.0) - f(-1.0);
            assert!((e1 - e2).abs() < 1e-10);
        }
    }

    #[test]
    fn spline_span_contains_linear_functions() {
        // least squares of x on [1, basis] leaves ~zero residual
        let x: Vec<f64> = (0..80).map(|i| (i as f64).sqrt() * 3.0).collect();
        let df = 4;
        let b = natural_cubic_spline_basis(&x, df).unwrap();
        let mut design = DMatrix::<f64>::zeros(x.len(), df + 1);
        for r in 0..x.len() {
            design[(r, 0)] = 1.0;
            for c in 0..df {
                design[(r, c + 1)] = b[(r, c)];
            }
        }
        let y = nalgebra::DVector::from_vec(x.clone());
        let coef = design
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12)
            .expect("solvable");
        let resid = &y - design * coef;
        assert!(resid.amax() < 1e-9, "max residual {}", resid.amax());
    }

    #[test]
    fn spline_interpolation_second_derivatives() {
        // independent check of the tridiagonal solve: the natural spline
        // through sin(x) has second derivatives close to -sin at interior
        // knots when knots are dense
        let knots: Vec<f64> = (0..40).map(|i| i as f64 * 0.08).collect();
        let y: Vec<f64> = knots.iter().map(|t| t.sin()).collect();
        let m = natural_second_derivatives(&knots, &y);
        for i in 5..35 {
            assert!(
                (m[i] + knots[i].sin()).abs() < 2e-3,
                "knot {i}: {} vs {}",
                m[i],
                -knots[i].sin()
            );
        }
    }

    fn synth_days(n: usize, start: NaiveDate) -> Vec<AnalyzedDay> {
        let mut dates = Vec::new();
        let mut d = start;
        while dates.len() < n {
            if (4..=10).contains(&d.month()) {
                dates.push(d);
            }
            d = d.succ_opt().expect("date overflow");
        }
        let temp: Vec<f64> = (0..n)
            .map(|i| 60.0 + 20.0 * (i as f64 * 0.05).sin())
            .collect();
        let dew: Vec<f64> = (0..n)
            .map(|i| 50.0 + 10.0 * (i as f64 * 0.11).cos() + 0.01 * i as f64)
            .collect();
        // genuine trailing means: phase-shifted, so not affine in the
        // same-day series (an affine relation would alias the spline blocks)
        let trailing = |x: &[f64], i: usize| {
            let lo = i.saturating_sub(2);
            x[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
        };
        (0..n)
            .map(|i| AnalyzedDay {
                date: dates[i],
                ozone: 20.0 + (i as f64 * 0.7) % 60.0,
                temp: temp[i],
                dewpoint: dew[i],
                rm_temp: trailing(&temp, i),
                rm_dew: trailing(&dew, i),
                deaths: [3, 4, 7],
            })
            .collect()
    }

    #[test]
    fn design_has_expected_columns_for_two_years() {
        // two calendar years -> round(7 x 2) = 14 time df per age group:
        // 3 age + 6 dow + 3 x 14 time + 6 rm-temp + 3 dew + 3 rm-dew = 63
        let days = synth_days(2 * 214, date(1996, 4, 1));
        let cfg = ConfounderConfig::default();
        let design = build_confounder_design(&days, &cfg).unwrap();
        assert_eq!(design.matrix.ncols(), 63);
        assert_eq!(design.column_labels.len(), 63);
        assert_eq!(design.matrix.nrows(), 3 * days.len());
        assert_eq!(design.column_labels[0], "age_u65");
        assert!(design.column_labels.iter().any(|l| l == "dow_Mon"));
        assert!(!design.column_labels.iter().any(|l| l == "dow_Sun"));
    }

    #[test]
    fn design_age_blocks_are_age_specific() {
        let days = synth_days(300, date(1998, 4, 1));
        let cfg = ConfounderConfig::default();
        let design = build_confounder_design(&days, &cfg).unwrap();
        let n = days.len();
        // age intercept pattern
        assert_eq!(design.matrix[(0, 0)], 1.0);
        assert_eq!(design.matrix[(n, 1)], 1.0);
        assert_eq!(design.matrix[(2 * n, 2)], 1.0);
        assert_eq!(design.matrix[(n, 0)], 0.0);
        // time spline columns live in their own age block
        let t0 = design
            .column_labels
            .iter()
            .position(|l| l == "time_u65_1")
            .unwrap();
        assert!(design.matrix[(0, t0)].abs() > 0.0 || design.matrix[(1, t0)].abs() > 0.0);
        assert_eq!(design.matrix[(n, t0)], 0.0);
    }

    #[test]
    fn same_day_temperature_block_is_optional() {
        let days = synth_days(250, date(1999, 4, 1));
        let mut cfg = ConfounderConfig::default();
        let base = build_confounder_design(&days, &cfg).unwrap().matrix.ncols();
        cfg.include_same_day_temp = true;
        let with_temp = build_confounder_design(&days, &cfg).unwrap();
        assert_eq!(with_temp.matrix.ncols(), base + cfg.same_day_temp_df);
        assert!(with_temp.column_labels.iter().any(|l| l == "temp_1"));
    }

    #[test]
    fn plan_reevaluates_identically_on_same_days() {
        let days = synth_days(220, date(2000, 4, 1));
        let cfg = ConfounderConfig::default();
        let plan = ConfounderPlan::build(&days, &cfg).unwrap();
        let d1 = plan.evaluate(&days).unwrap();
        let d2 = plan.evaluate(&days).unwrap();
        assert_eq!(d1.matrix, d2.matrix);
        // evaluating a subset reproduces the corresponding full-design rows
        let sub: Vec<AnalyzedDay> = days.iter().take(10).cloned().collect();
        let ds = plan.evaluate(&sub).unwrap();
        assert_eq!(ds.matrix.nrows(), 30);
        for age in 0..3 {
            for day in 0..10 {
                let sub_row = age * 10 + day;
                let full_row = age * days.len() + day;
                for c in 0..d1.matrix.ncols() {
                    assert_eq!(ds.matrix[(sub_row, c)], d1.matrix[(full_row, c)]);
                }
            }
        }
    }
}
