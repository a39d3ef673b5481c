//! Command-line entry points: `gen-data`, `preprocess`, `train`,
//! `sample`, `evaluate`, and `arb-audit`.
//!
//! Every subcommand is deterministic given its inputs, configuration,
//! and seed; file outputs are written atomically. Exit codes: 0 on
//! success, 2 for input/validation problems, 1 for internal errors.
//! Option precedence is CLI flag over config file over built-in
//! default; the config path itself falls back to the `VOLDIFF_CONFIG`
//! environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arbitrage::{penalty_loops, PricingContext};
use crate::dataprep::csvio::{
    atomic_write, read_market_csv, read_quotes_csv, read_surfaces_csv, write_market_csv,
    write_surfaces_csv, MarketRow,
};
use crate::dataprep::grid::{GridSpec, SurfaceGrid};
use crate::dataprep::synthetic::{self, SyntheticConfig};
use crate::dataprep::{smooth_surface, ConditioningConfig, Dataset, SmoothingConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{
    default_slices, evaluate, write_daily_csv, write_metrics_csv, write_summary_json, SliceSpec,
};
use crate::model::UNetConfig;
use crate::sampling::{
    read_samples_csv, sample_batch_with, write_samples_csv, SampleBatch, WeightSet,
    DEFAULT_SAMPLES,
};
use crate::training::{fit, write_loss_curve, Checkpoint, StopReason, TrainConfig};

const CONFIG_ENV_VAR: &str = "VOLDIFF_CONFIG";

/// Evaluation settings in the run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Central-interval level for calibration metrics.
    pub level: f64,
    /// Monitored slices; `None` uses the built-in taxonomy.
    pub slices: Option<Vec<SliceSpec>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { level: 0.9, slices: None }
    }
}

/// Optional path defaults, each overridable by the matching CLI flag.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// The run configuration file (JSON). Unknown keys are rejected; every
/// field has a default except paths, which also default to unset.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub train: TrainConfig,
    pub unet: UNetConfig,
    pub smoothing: SmoothingConfig,
    pub conditioning: ConditioningConfig,
    pub split: SplitSpec,
    pub pricing: PricingContext,
    pub synthetic: SyntheticConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = std::fs::read(path)
            .map_err(|source| Error::ReadInput { path: path.to_path_buf(), source })?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    /// Resolve the config from an explicit flag, the environment
    /// variable, or defaults.
    pub fn resolve(flag: Option<&Path>) -> Result<RunConfig> {
        if let Some(path) = flag {
            return Self::load(path);
        }
        if let Ok(env_path) = std::env::var(CONFIG_ENV_VAR) {
            return Self::load(Path::new(&env_path));
        }
        Ok(RunConfig::default())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "voldiff",
    about = "Conditional diffusion forecasting of implied-volatility surfaces",
    version
)]
struct Cli {
    /// Path to a JSON run configuration (or set VOLDIFF_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic surface and market CSVs.
    GenData(GenDataArgs),
    /// Smooth, normalize, and split raw data into a dataset store.
    Preprocess(PreprocessArgs),
    /// Train the diffusion model on a dataset store.
    Train(TrainArgs),
    /// Generate conditional surfaces from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated samples against ground truth.
    Evaluate(EvaluateArgs),
    /// Arbitrage-penalty audit of a surface CSV.
    ArbAudit(ArbAuditArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of days to generate (at least 50).
    #[arg(long)]
    pub days: usize,
    /// Generator seed; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for surfaces.csv and market.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Long-format quote CSV (smoothed onto the grid).
    #[arg(long, conflicts_with = "surfaces")]
    pub quotes: Option<PathBuf>,
    /// Wide-format surface CSV (already on the grid).
    #[arg(long)]
    pub surfaces: Option<PathBuf>,
    /// Market CSV with underlying and VIX returns.
    #[arg(long)]
    pub market: PathBuf,
    /// Output dataset store (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset store from `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint path; the loss curve is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the configured batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset store with the conditioning history.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated ISO dates, or "test" for the whole test range.
    #[arg(long)]
    pub dates: String,
    /// Surfaces per date.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub k: usize,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output sample CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Debug only: sample with live instead of EMA weights.
    #[arg(long, hide = true)]
    pub live_weights: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Ground-truth surface CSV.
    #[arg(long)]
    pub truth: PathBuf,
    /// Sample CSV from `sample` (or an external generator in the same
    /// format).
    #[arg(long)]
    pub samples: PathBuf,
    /// Output directory for metrics.csv, daily.csv, summary.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ArbAuditArgs {
    /// Surface CSV to audit.
    #[arg(long)]
    pub surfaces: PathBuf,
    /// Risk-free rate override.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Output penalty CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_data(args: &GenDataArgs, cfg: &RunConfig) -> Result<()> {
    let grid = GridSpec::standard();
    let seed = args.seed.unwrap_or(cfg.seed);
    let days = synthetic::generate(args.days, seed, &grid, &cfg.synthetic)?;
    std::fs::create_dir_all(&args.out)?;
    let surfaces: Vec<(NaiveDate, SurfaceGrid)> =
        days.iter().map(|d| (d.date, d.surface.clone())).collect();
    let market: Vec<MarketRow> = days
        .iter()
        .map(|d| MarketRow {
            date: d.date,
            underlying_return: d.underlying_return,
            vix_return: d.vix_return,
        })
        .collect();
    write_surfaces_csv(&args.out.join("surfaces.csv"), &surfaces)?;
    write_market_csv(&args.out.join("market.csv"), &market)?;
    Ok(())
}

pub fn cmd_preprocess(args: &PreprocessArgs, cfg: &RunConfig) -> Result<()> {
    let market = read_market_csv(&args.market)?;
    let grid = GridSpec::standard();
    let surfaces: Vec<(NaiveDate, SurfaceGrid)> = match (&args.quotes, &args.surfaces) {
        (Some(quotes_path), None) => {
            let quotes = read_quotes_csv(quotes_path)?;
            let mut by_date: BTreeMap<NaiveDate, Vec<crate::dataprep::QuoteRecord>> =
                BTreeMap::new();
            for q in quotes {
                by_date.entry(q.date).or_default().push(q);
            }
            use rayon::prelude::*;
            let dated: Vec<(NaiveDate, Vec<crate::dataprep::QuoteRecord>)> =
                by_date.into_iter().collect();
            dated
                .par_iter()
                .map(|(date, day_quotes)| {
                    Ok((*date, smooth_surface(day_quotes, &grid, &cfg.smoothing)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, Some(surfaces_path)) => read_surfaces_csv(surfaces_path)?,
        _ => {
            return Err(Error::Validation(
                "provide exactly one of --quotes or --surfaces".into(),
            ));
        }
    };
    let dataset = Dataset::build(surfaces, market, grid, cfg.split, cfg.conditioning)?;
    dataset.save(&args.out)
}

pub fn cmd_train(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let mut train_cfg = cfg.train;
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        train_cfg.batch_size = batch;
    }
    train_cfg.seed = args.seed.unwrap_or(cfg.seed);

    let out = fit(&dataset, &train_cfg, &cfg.unet, &cfg.pricing, |record| {
        if record.epoch == 1 || record.epoch % 25 == 0 {
            eprintln!(
                "epoch {:>5}  train {:.6}  val {:.6}  lr {:.2e}",
                record.epoch, record.train_loss, record.val_loss, record.lr
            );
        }
    })?;

    out.checkpoint.save(&args.out)?;
    let curve_path = args.out.with_file_name("loss_curve.csv");
    write_loss_curve(&curve_path, &out.curve)?;
    match out.stop {
        StopReason::Diverged { epoch, message } => Err(Error::Divergence(format!(
            "training diverged at epoch {epoch} ({message}); last good checkpoint written to {}",
            args.out.display()
        ))),
        StopReason::EarlyStopped { epoch } => {
            eprintln!("early stop at epoch {epoch}; best epoch {}", out.checkpoint.epoch);
            Ok(())
        }
        StopReason::CompletedAllEpochs => Ok(()),
    }
}

fn parse_dates(raw: &str, dataset: &Dataset) -> Result<Vec<usize>> {
    if raw == "test" {
        let targets = dataset.test_targets();
        if targets.is_empty() {
            return Err(Error::Validation("the dataset has no test targets".into()));
        }
        return Ok(targets);
    }
    raw.split(',')
        .map(|token| {
            let date = NaiveDate::parse_from_str(token.trim(), "%Y-%m-%d")
                .map_err(|e| Error::Validation(format!("bad date {token:?}: {e}")))?;
            let index = dataset
                .date_index(date)
                .ok_or_else(|| Error::Validation(format!("date {date} not in the dataset")))?;
            Ok(index)
        })
        .collect()
}

pub fn cmd_sample(args: &SampleArgs, cfg: &RunConfig) -> Result<()> {
    if args.k == 0 {
        return Err(Error::Validation("--k must be at least 1".into()));
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    if dataset.normalization != checkpoint.normalization
        || dataset.scalar_stats != checkpoint.scalar_stats
        || dataset.conditioning != checkpoint.conditioning
        || dataset.grid != checkpoint.grid
    {
        return Err(Error::Validation(
            "dataset statistics do not match the checkpoint; re-run preprocess or pass the original store"
                .into(),
        ));
    }
    let targets = parse_dates(&args.dates, &dataset)?;
    let series = dataset.feature_series()?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let weight_set = if args.live_weights { WeightSet::Live } else { WeightSet::Ema };

    use rayon::prelude::*;
    let batches: Vec<SampleBatch> = targets
        .par_iter()
        .map(|target| {
            let bundle = dataset.bundle(&series, *target)?;
            // Every date gets its own seed (and with it its own family
            // of per-chain streams), derived from the run seed and the
            // target index.
            let date_seed = seed ^ ((*target as u64) << 20);
            sample_batch_with(&bundle, &checkpoint, args.k, date_seed, weight_set)
        })
        .collect::<Result<Vec<_>>>()?;
    write_samples_csv(&args.out, &batches)
}

pub fn cmd_evaluate(args: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    let truth = read_surfaces_csv(&args.truth)?;
    let samples = read_samples_csv(&args.samples)?;
    let slices = cfg.eval.slices.clone().unwrap_or_else(default_slices);
    let grid = GridSpec::standard();
    let report = evaluate(&truth, &samples, &slices, &grid, &cfg.pricing, cfg.eval.level)?;
    std::fs::create_dir_all(&args.out)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &report)?;
    write_daily_csv(&args.out.join("daily.csv"), &report)?;
    write_summary_json(&args.out.join("summary.json"), &report)?;
    println!(
        "evaluated {} days: overall MAPE {:.4}%",
        report.daily.len(),
        report.overall_mape_pct
    );
    Ok(())
}

pub fn cmd_arb_audit(args: &ArbAuditArgs, cfg: &RunConfig) -> Result<()> {
    let surfaces = read_surfaces_csv(&args.surfaces)?;
    let grid = GridSpec::standard();
    let pricing = PricingContext {
        rate: args.rate.unwrap_or(cfg.pricing.rate),
        dividend_yield: cfg.pricing.dividend_yield,
    };
    use rayon::prelude::*;
    let rows: Vec<(NaiveDate, crate::arbitrage::PenaltyBreakdown)> = surfaces
        .par_iter()
        .map(|(date, surface)| Ok((*date, penalty_loops(surface, &grid, &pricing)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["date", "p1", "p2", "p3", "total"])?;
    for (date, p) in rows {
        writer.write_record([
            date.format("%Y-%m-%d").to_string(),
            p.calendar.to_string(),
            p.call_spread.to_string(),
            p.butterfly.to_string(),
            p.total.to_string(),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    atomic_write(&args.out, &bytes)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref())?;
    if let Some(threads) = cli.threads.or(cfg.threads) {
        // Ignore the error if a pool already exists (tests call this
        // repeatedly in one process).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args, &cfg),
        Command::Preprocess(args) => cmd_preprocess(args, &cfg),
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Sample(args) => cmd_sample(args, &cfg),
        Command::Evaluate(args) => cmd_evaluate(args, &cfg),
        Command::ArbAudit(args) => cmd_arb_audit(args, &cfg),
    }
}

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 3, "no_such_key": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"seed": 3, "train": {"epochs": 10}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn default_config_is_complete() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.epochs, 2000);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.steps, 500);
        assert_eq!(cfg.eval.level, 0.9);
        assert!(cfg.paths.data.is_none());
    }

    #[test]
    fn cli_parses_all_subcommands() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from([
            "voldiff", "gen-data", "--days", "300", "--seed", "7", "--out", "/tmp/x",
        ])
        .unwrap();
        match cli.command {
            Command::GenData(args) => {
                assert_eq!(args.days, 300);
                assert_eq!(args.seed, Some(7));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["voldiff", "no-such-command"]).is_err());
        assert!(Cli::try_parse_from(["voldiff", "gen-data", "--bogus"]).is_err());
    }
}
