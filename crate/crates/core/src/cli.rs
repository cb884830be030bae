//! Command-line front end. Every command writes a deterministic
//! `summary.json` and a `run_manifest.json` (which holds the wall time and
//! everything needed to replay the run) into its output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::approx::{bench_approx, bench_csv, make_partition, summarize_bench, ApproxMethod, GroupPartition};
use crate::bundle::{
    generate_synthetic, read_bundle, read_matrix_file, write_bundle, write_matrix_file, FeatureBundle, Manifest,
    SyntheticConfig,
};
use crate::cache::{build_cache, CacheHyper, CacheMode};
use crate::calibration::{class_margin, train_calibration, CalibrationLayer, ContrastiveConfig, NeighborMode};
use crate::error::Error;
use crate::trainer::{finetune, finetune_nw_baseline, train_log_csv, GradMode, TrainConfig};
use crate::tuner::{evaluate_model, grid_csv, grid_search, SearchSpace};

pub const THREADS_ENV: &str = "GPCACHE_THREADS";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CALIB_PROJ_ROLE: &str = "calib_proj";
pub const CALIB_BIAS_ROLE: &str = "calib_bias";

#[derive(Debug, Parser)]
#[command(name = "gpcache", version, about = "GP-calibrated cache adaptation on pre-extracted features")]
pub struct Cli {
    /// Cap on worker threads (default: all cores). GPCACHE_THREADS overrides it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic feature bundle.
    Generate(GenerateArgs),
    /// Train a similarity calibration layer and store it in the bundle.
    Calibrate(CalibrateArgs),
    /// Build (and optionally fine-tune) a cache model and report accuracy.
    Adapt(AdaptArgs),
    /// Benchmark exact and approximate cache readouts.
    Bench(BenchArgs),
    /// Grid-search hyperparameters on the validation split.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub shots: u64,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(4..))]
    pub dim: u64,
    #[arg(long, default_value_t = 0.45)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.3)]
    pub text_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    pub class_jitter: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sample_jitter: f64,
    /// Rank of the nuisance subspace augmentations move along (0: isotropic).
    #[arg(long, default_value_t = 0)]
    pub nuisance_rank: usize,
    /// Fraction of within-class noise variance in the nuisance subspace.
    #[arg(long, default_value_t = 0.5)]
    pub nuisance_share: f64,
    #[arg(long, default_value_t = 50)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub unlabeled_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bundle directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MiningArg {
    Hard,
    Random,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Neighbors per set (capped at the unlabeled pool size).
    #[arg(long, default_value_t = 128)]
    pub neighbors: usize,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-2)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long)]
    pub bias: bool,
    #[arg(long, value_enum, default_value_t = MiningArg::Hard)]
    pub mining: MiningArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the loss curve and run files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Zs,
    Nw,
    Gp,
}

impl From<ModeArg> for CacheMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Zs => CacheMode::ZeroShot,
            ModeArg::Nw => CacheMode::Nw,
            ModeArg::Gp => CacheMode::Gp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainArg {
    Free,
    Finetune,
    FinetuneNograd,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 5.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
}

impl HyperArgs {
    fn hyper(&self) -> Result<CacheHyper, CliError> {
        CacheHyper::new(self.alpha, self.beta, self.sigma2, self.eta).map_err(CliError::usage)
    }
}

/// Comma-separated value lists; unset lists use the default grid.
#[derive(Debug, Args)]
pub struct SpaceArgs {
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_beta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_sigma2: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_eta: Option<Vec<f64>>,
}

impl SpaceArgs {
    fn space(&self) -> Result<SearchSpace, CliError> {
        let d = SearchSpace::default();
        let space = SearchSpace {
            alpha: self.grid_alpha.clone().unwrap_or(d.alpha),
            beta: self.grid_beta.clone().unwrap_or(d.beta),
            sigma2: self.grid_sigma2.clone().unwrap_or(d.sigma2),
            eta: self.grid_eta.clone().unwrap_or(d.eta),
        };
        space.validate().map_err(CliError::usage)?;
        Ok(space)
    }
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Gp)]
    pub mode: ModeArg,
    /// Split the classes into this many independently solved groups.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub partition_seed: u64,
    /// Use the calibration layer stored in the bundle.
    #[arg(long)]
    pub calib: bool,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub cache: CacheArgs,
    #[arg(long, value_enum, default_value_t = TrainArg::Free)]
    pub train: TrainArg,
    /// Select hyperparameters by grid search instead of the fixed values.
    #[arg(long)]
    pub grid: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    pub rebuild_every: usize,
    /// Keep the raw keys unnormalized between steps.
    #[arg(long)]
    pub no_renormalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Methods such as exact, mean, group:8, nystrom:1600, rff:1024.
    #[arg(long, value_delimiter = ',', default_value = "exact,group:8,group:16,mean")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub cache: CacheArgs,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations; exit code 2.
    Usage(String),
    /// Failure while running; exit code 1.
    Runtime(Error),
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError::Usage(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Everything needed to replay a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_ms: f64,
    pub version: String,
}

/// Worker-thread count: the environment variable wins over the flag.
pub fn resolve_threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(flag),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

/// Output of one command before the shared bookkeeping is written.
struct Outcome {
    summary: Value,
    seeds: BTreeMap<String, u64>,
    artifacts: BTreeMap<String, String>,
    out: PathBuf,
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Runs a parsed command line. `args` is recorded verbatim in the run
/// manifest.
pub fn run(cli: Cli, args: Vec<String>) -> CliResult<()> {
    let threads = resolve_threads(cli.threads)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Runtime(Error::invalid(e.to_string())))?;
    let start = Instant::now();
    let (name, outcome) = pool.install(|| -> CliResult<(&str, Outcome)> {
        Ok(match &cli.command {
            Command::Generate(a) => ("generate", cmd_generate(a)?),
            Command::Calibrate(a) => ("calibrate", cmd_calibrate(a)?),
            Command::Adapt(a) => ("adapt", cmd_adapt(a)?),
            Command::Bench(a) => ("bench", cmd_bench(a)?),
            Command::Grid(a) => ("grid", cmd_grid(a)?),
        })
    })?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut artifacts = outcome.artifacts;
    let summary_path = outcome.out.join(SUMMARY_FILE);
    write_json(&summary_path, &outcome.summary)?;
    artifacts.insert("summary".into(), display(&summary_path));
    let manifest_path = outcome.out.join(RUN_MANIFEST_FILE);
    artifacts.insert("run_manifest".into(), display(&manifest_path));
    let manifest = RunManifest {
        command: name.to_string(),
        args,
        seeds: outcome.seeds,
        artifacts,
        threads: pool.current_num_threads(),
        wall_ms,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&manifest_path, &manifest)?;
    println!("summary: {}", summary_path.display());
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<Outcome> {
    let cfg = SyntheticConfig {
        classes: a.classes as usize,
        shots: a.shots as usize,
        dim: a.dim as usize,
        spread: a.spread,
        text_noise: a.text_noise,
        seed: a.seed,
        n_test_per_class: a.test_per_class,
        n_val_per_class: a.val_per_class,
        n_unlabeled_per_class: a.unlabeled_per_class,
        class_jitter: a.class_jitter,
        sample_jitter: a.sample_jitter,
        nuisance_rank: a.nuisance_rank,
        nuisance_share: a.nuisance_share,
    };
    if !(a.spread >= 0.0 && a.spread.is_finite()) {
        return Err(CliError::Usage(format!("--spread must be finite and >= 0, got {}", a.spread)));
    }
    let bundle = generate_synthetic(&cfg).map_err(|e| match e {
        Error::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Runtime(other),
    })?;
    write_bundle(&bundle, &a.out)?;
    let zs = crate::tuner::evaluate(
        &bundle,
        &CacheHyper::new(0.0, 1.0, 0.0, 0.0)?,
        CacheMode::ZeroShot,
        None,
        None,
    )?;
    println!(
        "bundle: {} classes, dim {}, train {}, val {}, test {}, unlabeled {}",
        bundle.num_classes(),
        bundle.dim(),
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len(),
        bundle.unlabeled.as_ref().map_or(0, |u| u.rows())
    );
    println!("zero-shot accuracy: val {:.4}, test {:.4}", zs.val_acc, zs.test_acc);
    let summary = json!({
        "command": "generate",
        "config": cfg,
        "bundle": display(&a.out),
        "num_classes": bundle.num_classes(),
        "dim": bundle.dim(),
        "train_rows": bundle.train.len(),
        "val_rows": bundle.val.len(),
        "test_rows": bundle.test.len(),
        "unlabeled_rows": bundle.unlabeled.as_ref().map_or(0, |u| u.rows()),
        "zero_shot_val_acc": zs.val_acc,
        "zero_shot_test_acc": zs.test_acc,
    });
    Ok(Outcome {
        summary,
        seeds: BTreeMap::from([("data".into(), a.seed)]),
        artifacts: BTreeMap::from([("bundle".into(), display(&a.out))]),
        out: a.out.clone(),
    })
}

/// Stores a calibration layer next to the bundle's features and records it
/// in the manifest.
pub fn save_calibration(dir: &Path, layer: &CalibrationLayer) -> crate::Result<()> {
    let mut manifest = Manifest::load(dir)?;
    let proj_name = format!("{CALIB_PROJ_ROLE}.gpcb");
    write_matrix_file(&dir.join(&proj_name), layer.proj())?;
    manifest.files.insert(CALIB_PROJ_ROLE.into(), proj_name);
    match layer.bias() {
        Some(b) => {
            let name = format!("{CALIB_BIAS_ROLE}.gpcb");
            write_matrix_file(&dir.join(&name), &DMatrix::from_row_slice(1, b.len(), b.as_slice()))?;
            manifest.files.insert(CALIB_BIAS_ROLE.into(), name);
        }
        None => {
            manifest.files.remove(CALIB_BIAS_ROLE);
        }
    }
    manifest.save(dir)
}

/// The calibration layer stored in a bundle directory.
pub fn load_calibration(dir: &Path) -> crate::Result<CalibrationLayer> {
    let manifest = Manifest::load(dir)?;
    let proj = read_matrix_file(&manifest.file_for(dir, CALIB_PROJ_ROLE)?, CALIB_PROJ_ROLE)?;
    let bias = match manifest.files.contains_key(CALIB_BIAS_ROLE) {
        true => {
            let b = read_matrix_file(&manifest.file_for(dir, CALIB_BIAS_ROLE)?, CALIB_BIAS_ROLE)?;
            Some(DVector::from_row_slice(b.as_slice()))
        }
        false => None,
    };
    CalibrationLayer::from_parts(proj, bias)
}

fn cmd_calibrate(a: &CalibrateArgs) -> CliResult<Outcome> {
    let bundle = read_bundle(&a.bundle)?;
    let (Some(u), Some(aug)) = (&bundle.unlabeled, &bundle.unlabeled_augmented) else {
        return Err(CliError::Runtime(Error::invalid(format!(
            "bundle {} has no unlabeled and augmented features to calibrate on",
            a.bundle.display()
        ))));
    };
    let cfg = ContrastiveConfig {
        batch_size: a.batch_size,
        neighbors: a.neighbors.min(u.rows()),
        temperature: a.temperature,
        epochs: a.epochs,
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        momentum: a.momentum,
        seed: a.seed,
        bias: a.bias,
        mining: match a.mining {
            MiningArg::Hard => NeighborMode::Hard,
            MiningArg::Random => NeighborMode::Random,
        },
    };
    cfg.validate().map_err(CliError::usage)?;
    let (layer, losses) = train_calibration(u, aug, &cfg)?;
    save_calibration(&a.bundle, &layer)?;
    // report on what a later `adapt --calib` will actually load
    let stored = load_calibration(&a.bundle)?;

    create_dir(&a.out)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for e in &losses {
        csv.push_str(&format!("{},{:.8}\n", e.epoch, e.mean_loss));
    }
    let loss_path = a.out.join("calibration_loss.csv");
    write_text(&loss_path, &csv)?;

    let margin_raw = class_margin(&bundle.val.x, bundle.val.y.labels());
    let margin_cal = class_margin(&stored.apply(&bundle.val.x)?, bundle.val.y.labels());
    println!("validation class margin: raw {margin_raw:.4}, calibrated {margin_cal:.4}");
    let summary = json!({
        "command": "calibrate",
        "bundle": display(&a.bundle),
        "config": {
            "batch_size": cfg.batch_size,
            "neighbors": cfg.neighbors,
            "temperature": cfg.temperature,
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "weight_decay": cfg.weight_decay,
            "momentum": cfg.momentum,
            "seed": cfg.seed,
            "bias": cfg.bias,
            "mining": format!("{:?}", cfg.mining).to_lowercase(),
        },
        "epoch_losses": losses.iter().map(|e| e.mean_loss).collect::<Vec<_>>(),
        "val_margin_raw": margin_raw,
        "val_margin_calibrated": margin_cal,
    });
    let mut artifacts = BTreeMap::from([
        ("loss_csv".into(), display(&loss_path)),
        (CALIB_PROJ_ROLE.into(), display(&a.bundle.join(format!("{CALIB_PROJ_ROLE}.gpcb")))),
    ]);
    if a.bias {
        artifacts.insert(CALIB_BIAS_ROLE.into(), display(&a.bundle.join(format!("{CALIB_BIAS_ROLE}.gpcb"))));
    }
    Ok(Outcome {
        summary,
        seeds: BTreeMap::from([("calibration".into(), a.seed)]),
        artifacts,
        out: a.out.clone(),
    })
}

struct CacheSetup {
    bundle: FeatureBundle,
    mode: CacheMode,
    calib: Option<CalibrationLayer>,
    partition: Option<GroupPartition>,
}

fn setup_cache(a: &CacheArgs) -> CliResult<CacheSetup> {
    let bundle = read_bundle(&a.bundle)?;
    let calib = if a.calib {
        Some(load_calibration(&a.bundle)?)
    } else {
        None
    };
    let partition = match a.groups {
        Some(g) => {
            if g == 0 || g > bundle.num_classes() {
                return Err(CliError::Usage(format!(
                    "--groups must be in 1..={}, got {g}",
                    bundle.num_classes()
                )));
            }
            Some(make_partition(bundle.num_classes(), g, a.partition_seed)?)
        }
        None => None,
    };
    Ok(CacheSetup {
        bundle,
        mode: a.mode.into(),
        calib,
        partition,
    })
}

fn hyper_json(h: &CacheHyper) -> Value {
    json!({ "alpha": h.alpha, "beta": h.beta(), "sigma2": h.sigma2, "eta": h.eta })
}

fn cache_seeds(a: &CacheArgs) -> BTreeMap<String, u64> {
    let mut seeds = BTreeMap::new();
    if a.groups.is_some() {
        seeds.insert("partition".into(), a.partition_seed);
    }
    seeds
}

fn cmd_adapt(a: &AdaptArgs) -> CliResult<Outcome> {
    if a.cache.mode == ModeArg::Zs && a.train != TrainArg::Free {
        return Err(CliError::Usage("--mode zs has no keys to fine-tune".into()));
    }
    if a.train != TrainArg::Free && a.cache.mode == ModeArg::Nw && (a.cache.groups.is_some() || a.cache.calib) {
        return Err(CliError::Usage(
            "fine-tuning the N-W baseline supports neither --groups nor --calib".into(),
        ));
    }
    let fixed = a.hyper.hyper()?;
    let space = if a.grid { Some(a.space.space()?) } else { None };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        mode: if a.train == TrainArg::FinetuneNograd {
            GradMode::NoGrad
        } else {
            GradMode::FullGrad
        },
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        renormalize: !a.no_renormalize,
        rebuild_every: a.rebuild_every,
    };
    if a.train != TrainArg::Free {
        train_cfg.validate().map_err(CliError::usage)?;
    }

    let setup = setup_cache(&a.cache)?;
    let b = &setup.bundle;
    create_dir(&a.out)?;
    let mut artifacts = BTreeMap::new();

    let (hyper, grid_best) = match &space {
        Some(space) => {
            let res = grid_search(b.tuning_view(), space, setup.mode, setup.calib.as_ref(), setup.partition.as_ref())?;
            let path = a.out.join("grid.csv");
            write_text(&path, &grid_csv(&res.rows))?;
            artifacts.insert("grid_csv".into(), display(&path));
            (res.best, Some(res.best_val_acc))
        }
        None => (fixed, None),
    };

    let free = build_cache(&b.train.x, &b.train.y, hyper, setup.calib.as_ref(), setup.partition.as_ref())?;
    let free_report = evaluate_model(b, &free, setup.mode)?;
    let (model, trained) = match a.train {
        TrainArg::Free => (free, false),
        _ => {
            let out = match setup.mode {
                CacheMode::Nw => finetune_nw_baseline(b, hyper, &train_cfg)?,
                _ => finetune(b, hyper, &train_cfg, setup.calib.as_ref(), setup.partition.as_ref())?,
            };
            let log_path = a.out.join("train_log.csv");
            write_text(&log_path, &train_log_csv(&out.log))?;
            artifacts.insert("train_log_csv".into(), display(&log_path));
            let keys_path = a.out.join("keys.gpcb");
            write_matrix_file(&keys_path, out.model.keys().as_matrix())?;
            artifacts.insert("keys".into(), display(&keys_path));
            (out.model, true)
        }
    };
    let hyper_path = a.out.join("hyper.json");
    write_json(&hyper_path, &hyper_json(&hyper))?;
    artifacts.insert("hyper".into(), display(&hyper_path));

    let report = if trained {
        evaluate_model(b, &model, setup.mode)?
    } else {
        free_report.clone()
    };
    println!(
        "{} ({}): val {:.4}, test {:.4}",
        format!("{:?}", a.cache.mode).to_lowercase(),
        format!("{:?}", a.train).to_lowercase(),
        report.val_acc,
        report.test_acc
    );

    let mut seeds = cache_seeds(&a.cache);
    if trained {
        seeds.insert("train".into(), a.seed);
    }
    let summary = json!({
        "command": "adapt",
        "bundle": display(&a.cache.bundle),
        "mode": format!("{:?}", a.cache.mode).to_lowercase(),
        "train": format!("{:?}", a.train).to_lowercase(),
        "groups": a.cache.groups,
        "calibrated": a.cache.calib,
        "grid": a.grid,
        "grid_best_val_acc": grid_best,
        "hyper": hyper_json(&hyper),
        "training_free_val_acc": free_report.val_acc,
        "val_acc": report.val_acc,
        "test_acc": report.test_acc,
        "per_class_acc": report.per_class_acc,
    });
    Ok(Outcome {
        summary,
        seeds,
        artifacts,
        out: a.out.clone(),
    })
}

fn cmd_bench(a: &BenchArgs) -> CliResult<Outcome> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<ApproxMethod>())
        .collect::<crate::Result<Vec<_>>>()
        .map_err(CliError::usage)?;
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let hyper = a.hyper.hyper()?;
    let bundle = read_bundle(&a.bundle)?;
    let rows = bench_approx(&bundle, &hyper, &methods, a.repeats, a.seed)?;
    create_dir(&a.out)?;
    let csv_path = a.out.join("bench.csv");
    write_text(&csv_path, &bench_csv(&rows))?;
    let summaries = summarize_bench(&rows);
    for s in &summaries {
        let label = match s.param {
            Some(p) => format!("{}:{p}", s.method),
            None => s.method.clone(),
        };
        println!(
            "{label:>14}  acc {:.4}  build {:9.2} ms  query {:9.2} ms",
            s.mean_accuracy, s.median_build_ms, s.median_query_ms
        );
    }
    // timings vary run to run, so only accuracies go into the summary
    let results: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "method": r.method, "param": r.param, "seed": r.seed, "accuracy": r.accuracy }))
        .collect();
    let summary = json!({
        "command": "bench",
        "bundle": display(&a.bundle),
        "hyper": hyper_json(&hyper),
        "repeats": a.repeats,
        "results": results,
    });
    Ok(Outcome {
        summary,
        seeds: BTreeMap::from([("bench".into(), a.seed)]),
        artifacts: BTreeMap::from([("bench_csv".into(), display(&csv_path))]),
        out: a.out.clone(),
    })
}

fn cmd_grid(a: &GridArgs) -> CliResult<Outcome> {
    let space = a.space.space()?;
    let setup = setup_cache(&a.cache)?;
    let b = &setup.bundle;
    let res = grid_search(b.tuning_view(), &space, setup.mode, setup.calib.as_ref(), setup.partition.as_ref())?;
    create_dir(&a.out)?;
    let csv_path = a.out.join("grid.csv");
    write_text(&csv_path, &grid_csv(&res.rows))?;
    // the test split is scored once, after selection
    let model = build_cache(&b.train.x, &b.train.y, res.best, setup.calib.as_ref(), setup.partition.as_ref())?;
    let report = evaluate_model(b, &model, setup.mode)?;
    println!(
        "best: alpha {} beta {} sigma2 {} eta {} (val {:.4}, test {:.4})",
        res.best.alpha,
        res.best.beta(),
        res.best.sigma2,
        res.best.eta,
        res.best_val_acc,
        report.test_acc
    );
    let summary = json!({
        "command": "grid",
        "bundle": display(&a.cache.bundle),
        "mode": format!("{:?}", a.cache.mode).to_lowercase(),
        "groups": a.cache.groups,
        "calibrated": a.cache.calib,
        "points": res.rows.len(),
        "best": hyper_json(&res.best),
        "best_val_acc": res.best_val_acc,
        "test_acc": report.test_acc,
    });
    Ok(Outcome {
        summary,
        seeds: cache_seeds(&a.cache),
        artifacts: BTreeMap::from([("grid_csv".into(), display(&csv_path))]),
        out: a.out.clone(),
    })
}
