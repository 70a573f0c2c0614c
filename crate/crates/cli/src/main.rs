//! Batch front end for the two-stage surface pipeline. Five subcommands
//! cover the workflow: `simulate` writes a synthetic dataset, `stage1` fits
//! the per-city regressions, `stage2` runs the pooling chain, `report`
//! emits plot-ready grids and summary tables, and `cv` scores the model
//! variants on a holdout split.
//!
//! Output on stdout is deterministic for a given seed and configuration so
//! reruns can be compared byte for byte; log chatter goes to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use monosurf::config::KEY_DOCS;
use monosurf::data::{generate_synthetic, load_cities, write_synthetic_dataset};
use monosurf::hier::run_chain;
use monosurf::stage1::{fit_cities, Stage1Output};
use monosurf::surfaces::{
    self, ExcessRow, GridAxes, SurfaceKind,
};
use monosurf::{cv, ModelVariant, PosteriorSample, RunConfig};

fn key_help() -> String {
    let defaults = RunConfig::default();
    let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (set via a `key = value` config file or --set):\n",
    );
    for (key, help) in KEY_DOCS {
        let value = defaults.get(key).unwrap_or_default();
        out.push_str(&format!("  {key:width$}  {help} [default: {value}]\n"));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "monosurf",
    about = "Two-stage monotone ozone-temperature mortality surfaces",
    after_help = key_help(),
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by every subcommand: configuration layering and the
/// thread pool. Precedence is defaults, then the config file, then --set
/// overrides in order, then --seed.
#[derive(Args)]
struct CommonOpts {
    /// Plain-text config file of `key = value` lines (# comments allowed)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set iterations=5000
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Top-level random seed (shorthand for --set seed=N, applied last)
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for the parallel sections; 0 means all cores.
    /// Results do not depend on the thread count.
    #[arg(long, value_name = "N", default_value_t = 0)]
    threads: usize,
}

impl CommonOpts {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.merge_file(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
        }
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got '{pair}'"))?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build_global()
                .context("building the thread pool")?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-city dataset with a known ground truth
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory for metadata.csv, per-city CSVs, and ground_truth.json
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Fit the per-city first-stage regressions and serialize them
    Stage1 {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory holding metadata.csv and one CSV per city
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Output path for the serialized first-stage fits (JSON)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Keep going when some cities fail to fit instead of exiting
        #[arg(long)]
        allow_skip: bool,
    },
    /// Run the second-stage pooling chain on serialized first-stage fits
    Stage2 {
        #[command(flatten)]
        common: CommonOpts,
        /// Serialized first-stage fits from the stage1 subcommand
        #[arg(long, value_name = "FILE")]
        stage1: PathBuf,
        /// Output path for the posterior sample (JSON)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Chain diagnostics CSV; defaults next to the sample file
        #[arg(long, value_name = "FILE")]
        diagnostics: Option<PathBuf>,
        /// Optional full draw dump CSV (large; off by default)
        #[arg(long, value_name = "FILE")]
        draws: Option<PathBuf>,
    },
    /// Emit surface grids and summary tables from a posterior sample
    Report {
        #[command(flatten)]
        common: CommonOpts,
        /// Serialized first-stage fits from the stage1 subcommand
        #[arg(long, value_name = "FILE")]
        stage1: PathBuf,
        /// Posterior sample from the stage2 subcommand
        #[arg(long, value_name = "FILE")]
        sample: PathBuf,
        /// Directory for the emitted CSV files
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Score model variants by holdout deviance on one dataset
    Cv {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory holding metadata.csv and one CSV per city
        #[arg(long, value_name = "DIR")]
        data_dir: PathBuf,
        /// Output path for the deviance table (CSV)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Comma-separated variants to score; all six when omitted
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .init();
    match Cli::parse().cmd {
        Cmd::Simulate { common, out_dir } => cmd_simulate(&common, &out_dir),
        Cmd::Stage1 {
            common,
            data_dir,
            out,
            allow_skip,
        } => cmd_stage1(&common, &data_dir, &out, allow_skip),
        Cmd::Stage2 {
            common,
            stage1,
            out,
            diagnostics,
            draws,
        } => cmd_stage2(&common, &stage1, &out, diagnostics, draws),
        Cmd::Report {
            common,
            stage1,
            sample,
            out_dir,
        } => cmd_report(&common, &stage1, &sample, &out_dir),
        Cmd::Cv {
            common,
            data_dir,
            out,
            variants,
        } => cmd_cv(&common, &data_dir, &out, &variants),
    }
}

fn cmd_simulate(common: &CommonOpts, out_dir: &Path) -> Result<()> {
    let cfg = common.load()?;
    let spec = cfg.synth_spec();
    let (cities, truth) = generate_synthetic(&spec)?;
    write_synthetic_dataset(out_dir, &cities, &truth)?;
    println!(
        "simulate: wrote {} cities x {} days (family {}, seed {}) to {}",
        cities.len(),
        spec.days_per_city,
        spec.family.as_str(),
        spec.seed,
        out_dir.display()
    );
    Ok(())
}

fn cmd_stage1(common: &CommonOpts, data_dir: &Path, out: &Path, allow_skip: bool) -> Result<()> {
    let cfg = common.load()?;
    let (cities, reports) = load_cities(data_dir)?;
    println!(
        "stage1: loaded {} cities from {}",
        cities.len(),
        data_dir.display()
    );
    for r in &reports {
        println!(
            "  {}: {} rows read ({} missing ozone, {} missing temperature)",
            r.city_id, r.rows_read, r.missing_ozone, r.missing_temp
        );
    }
    let fitted = fit_cities(&cities, cfg.m1, cfg.m2, &cfg.confounders(false))?;
    for fit in &fitted.fits {
        println!(
            "  {}: fitted on {} days, local orders ({}, {})",
            fit.meta.city_id, fit.n_days, fit.ozone_basis.order, fit.temp_basis.order
        );
    }
    for failure in &fitted.failures {
        println!("  {}: FAILED ({})", failure.city_id, failure.reason);
    }
    if !fitted.failures.is_empty() && !allow_skip {
        bail!(
            "{} of {} cities failed the first stage (rerun with --allow-skip to keep the rest)",
            fitted.failures.len(),
            cities.len()
        );
    }
    fitted.save(out)?;
    println!("stage1: wrote {} fits to {}", fitted.fits.len(), out.display());
    Ok(())
}

fn cmd_stage2(
    common: &CommonOpts,
    stage1_path: &Path,
    out: &Path,
    diagnostics: Option<PathBuf>,
    draws: Option<PathBuf>,
) -> Result<()> {
    let cfg = common.load()?;
    if !cfg.variant.is_surface() {
        bail!(
            "variant {} is an additive reduction scored by the cv subcommand; \
             stage2 pools the bivariate surface variants",
            cfg.variant
        );
    }
    let stage1 = Stage1Output::load(stage1_path)?;
    let sample = run_chain(&stage1, &cfg.hyperpriors(), &cfg.chain_for(cfg.variant))?;
    sample.save(out)?;
    let diag_path = diagnostics.unwrap_or_else(|| out.with_extension("diagnostics.csv"));
    sample.write_diagnostics_csv(&diag_path)?;
    if let Some(path) = &draws {
        sample.write_draws_csv(path)?;
    }
    println!(
        "stage2: {} on {} cities, {} retained draws, rho acceptance {:.3}",
        cfg.variant,
        sample.n_cities(),
        sample.n_draws(),
        sample.acceptance_rho
    );
    println!(
        "stage2: sample {} diagnostics {}",
        out.display(),
        diag_path.display()
    );
    Ok(())
}

fn cmd_report(
    common: &CommonOpts,
    stage1_path: &Path,
    sample_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let stage1 = Stage1Output::load(stage1_path)?;
    let sample = PosteriorSample::load(sample_path)?;

    let fit_ids: Vec<&str> = stage1
        .fits
        .iter()
        .map(|f| f.meta.city_id.as_str())
        .collect();
    if sample.city_ids != fit_ids {
        bail!(
            "the posterior sample covers cities {:?} but the first-stage file holds {:?}",
            sample.city_ids,
            fit_ids
        );
    }
    if sample.m1 != stage1.global.m1 || sample.m2 != stage1.global.m2 {
        bail!(
            "pooled orders disagree: sample ({}, {}) vs first stage ({}, {})",
            sample.m1,
            sample.m2,
            stage1.global.m1,
            stage1.global.m2
        );
    }

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let global = &stage1.global;
    let mut files = 0usize;

    // Per-city grids over each city's own observed rectangle.
    for (i, fit) in stage1.fits.iter().enumerate() {
        let axes = GridAxes::over_points(&fit.surf_points, cfg.grid)?;
        let log_rr = surfaces::log_rr_surface(&sample, global, i, &axes, &fit.surf_points)?;
        surfaces::write_grid_csv(
            &log_rr,
            &out_dir.join(format!("log_rr_{}.csv", fit.meta.city_id)),
        )?;
        let inter = surfaces::interaction_surface(&sample, global, i, &axes, &fit.surf_points)?;
        surfaces::write_grid_csv(
            &inter,
            &out_dir.join(format!("interaction_{}.csv", fit.meta.city_id)),
        )?;
        files += 2;
    }

    // National grids: pool per-city draws on one shared grid spanning the
    // union of the observed rectangles; support decides which cities vote
    // at each point.
    let mut ozone = (f64::INFINITY, f64::NEG_INFINITY);
    let mut temp = (f64::INFINITY, f64::NEG_INFINITY);
    for fit in &stage1.fits {
        let (o, t) = surfaces::point_ranges(&fit.surf_points)?;
        ozone = (ozone.0.min(o.0), ozone.1.max(o.1));
        temp = (temp.0.min(t.0), temp.1.max(t.1));
    }
    let axes = GridAxes::over_ranges(ozone, temp, cfg.grid)?;
    for (kind, name) in [
        (SurfaceKind::LogRelativeRate, "log_rr_national.csv"),
        (SurfaceKind::Interaction, "interaction_national.csv"),
    ] {
        let per_city: Vec<_> = stage1
            .fits
            .iter()
            .enumerate()
            .map(|(i, fit)| {
                surfaces::draw_surfaces(&sample, global, i, &axes, &fit.surf_points, kind)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = per_city.iter().collect();
        let national = surfaces::national_surface(&refs)?;
        surfaces::write_grid_csv(&national, &out_dir.join(name))?;
        files += 1;
    }

    // Stratified high- versus moderate-temperature comparison per city.
    let stratified: Vec<_> = stage1
        .fits
        .iter()
        .enumerate()
        .map(|(i, fit)| surfaces::stratified_ratio(&sample, global, i, &fit.surf_points))
        .collect::<Result<Vec<_>, _>>()?;
    surfaces::write_stratified_csv(&stratified, &out_dir.join("stratified.csv"))?;
    files += 1;

    // Excess-mortality table: cities, then regions, then the national pool.
    let per_city_draws: Vec<Vec<f64>> = stage1
        .fits
        .iter()
        .enumerate()
        .map(|(i, fit)| surfaces::excess_draws(&sample, global, i, &fit.surf_points))
        .collect::<Result<Vec<_>, _>>()?;
    let mut excess = Vec::new();
    for (fit, draws) in stage1.fits.iter().zip(&per_city_draws) {
        excess.push(ExcessRow {
            scope: "city".into(),
            name: fit.meta.city_id.clone(),
            summary: surfaces::summarize_scalar(draws)?,
        });
    }
    let mut regions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, fit) in stage1.fits.iter().enumerate() {
        regions.entry(fit.meta.region.as_str()).or_default().push(i);
    }
    for (region, members) in &regions {
        let subset: Vec<Vec<f64>> = members.iter().map(|&i| per_city_draws[i].clone()).collect();
        excess.push(ExcessRow {
            scope: "region".into(),
            name: (*region).to_string(),
            summary: surfaces::summarize_scalar(&surfaces::pooled_scalar_draws(&subset)?)?,
        });
    }
    excess.push(ExcessRow {
        scope: "national".into(),
        name: "national".into(),
        summary: surfaces::summarize_scalar(&surfaces::pooled_scalar_draws(&per_city_draws)?)?,
    });
    surfaces::write_excess_csv(&excess, &out_dir.join("excess.csv"))?;
    files += 1;

    println!(
        "report: {} cities on a {}x{} grid",
        stage1.fits.len(),
        cfg.grid,
        cfg.grid
    );
    println!("report: wrote {} files to {}", files, out_dir.display());
    Ok(())
}

fn cmd_cv(common: &CommonOpts, data_dir: &Path, out: &Path, variants: &[String]) -> Result<()> {
    let cfg = common.load()?;
    let variants: Vec<ModelVariant> = if variants.is_empty() {
        ModelVariant::ALL.to_vec()
    } else {
        variants
            .iter()
            .map(|name| name.parse::<ModelVariant>().map_err(anyhow::Error::from))
            .collect::<Result<Vec<_>>>()?
    };
    let (cities, _) = load_cities(data_dir)?;
    let report = cv::run_cv(&cities, &cfg, &variants)?;
    report.write_csv(out)?;
    println!(
        "cv: {} cities, {} holdout days ({} split, train fraction {}, seed {})",
        report.n_cities,
        report.holdout_days,
        if report.block { "block" } else { "random" },
        report.train_fraction,
        report.seed
    );
    for result in &report.results {
        println!(
            "  {}: deviance {} | ozone tail {} | temp tail {} | joint tail {}",
            result.variant,
            result.deviance.overall,
            result.deviance.ozone_tail,
            result.deviance.temp_tail,
            result.deviance.joint_tail
        );
    }
    println!("cv: wrote {}", out.display());
    Ok(())
}
