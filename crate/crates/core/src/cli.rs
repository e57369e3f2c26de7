//! Command-line front end: train, eval, reconstruct, gradcheck, export-phi.
//!
//! Flag values override config-file values, which override the
//! `CS_SSIM_DATA_DIR` environment variable and built-in defaults. Config
//! files are flat `key = value` text with `#` comment lines, keyed by the
//! flag names with underscores.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{load_cifar10, make_manifest, Split};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::image::save_pgm;
use crate::network::{extract_sensing_matrix, Activation, ArchitectureSpec};
use crate::rng::sub_seed;
use crate::ssim::WeightKind;
use crate::trainer::{
    evaluate, load_checkpoint, load_matrix, reconstruct, save_checkpoint, save_matrix,
    train_streaming, LossKind, MonitorKind, TrainConfig,
};

pub const DATA_DIR_ENV: &str = "CS_SSIM_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "cs-ssim",
    version,
    about = "Jointly learn a compressed-sensing matrix and reconstruction network under SSIM or MSE loss"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train a network on CIFAR-10 binary data and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split (uniform-weight SSIM and MSE).
    Eval(EvalArgs),
    /// Reconstruct test images through a checkpoint and write PGM files.
    Reconstruct(ReconstructArgs),
    /// Run the finite-difference gradient suites; exit 0 iff all pass.
    Gradcheck(GradcheckArgs),
    /// Write the detached sensing matrix in the checkpoint tensor format.
    ExportPhi(ExportPhiArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Flat `key = value` config file; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding data_batch_1..5.bin and test_batch.bin.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Sensing rate R = M/N (0 < R < 1).
    #[arg(long)]
    pub rate: Option<f64>,
    /// Hidden width factor B (1 or 2).
    #[arg(long)]
    pub width_factor: Option<usize>,
    /// Number of hidden reconstruction layers K (>= 1).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Training loss: ssim or mse.
    #[arg(long)]
    pub loss: Option<String>,
    /// SSIM window weighting: uniform or log.
    #[arg(long)]
    pub weighting: Option<String>,
    /// SSIM window side length P.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Consecutive non-improving epochs tolerated before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Base seed; init/shuffle/split streams are derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of raw training images carved off for validation.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Use only the first K training images.
    #[arg(long)]
    pub subset_train: Option<usize>,
    /// Use only the first K test images.
    #[arg(long)]
    pub subset_test: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Quantity monitored for early stopping: validation or train.
    #[arg(long)]
    pub monitor: Option<String>,
    /// Output layer activation: sigmoid or linear.
    #[arg(long)]
    pub output_activation: Option<String>,
    /// Record elapsed time as 0 in logs so seeded runs are bit-identical.
    #[arg(long)]
    pub reproducible: Option<bool>,
    /// Precompute per-image reference patch statistics (memory for speed).
    #[arg(long)]
    pub cache_reference_stats: Option<bool>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub subset_test: Option<usize>,
    /// SSIM window override; defaults to the checkpoint's trained window.
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// How many test images to reconstruct.
    #[arg(long, default_value_t = 2)]
    pub count: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Random image pairs per SSIM suite.
    #[arg(long, default_value_t = 36)]
    pub pairs: usize,
}

#[derive(Args, Debug)]
pub struct ExportPhiArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

const FILE_KEYS: [&str; 20] = [
    "data_dir",
    "rate",
    "width_factor",
    "depth",
    "loss",
    "weighting",
    "window",
    "learning_rate",
    "batch_size",
    "patience",
    "max_epochs",
    "seed",
    "val_fraction",
    "subset_train",
    "subset_test",
    "out_dir",
    "monitor",
    "output_activation",
    "reproducible",
    "cache_reference_stats",
];

/// Parsed config file: flat `key = value`, `#` comment lines, unknown keys
/// rejected.
pub struct FileValues(HashMap<String, String>);

pub fn parse_config_file(path: &Path) -> Result<FileValues> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `key = value`, got `{line}`",
                path.display(),
                lineno + 1
            ))
        })?;
        let key = k.trim().to_string();
        if !FILE_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown config key `{key}`",
                path.display(),
                lineno + 1
            )));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(FileValues(map))
}

impl FileValues {
    fn empty() -> Self {
        FileValues(HashMap::new())
    }

    fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("config key `{key}`: {e}"))),
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Fully resolved training invocation.
pub struct TrainSettings {
    pub config: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

/// Merge flags, config file, environment, and defaults into a validated
/// [`TrainConfig`].
pub fn resolve_train(args: &TrainArgs) -> Result<TrainSettings> {
    let file = match &args.config {
        Some(path) => parse_config_file(path)?,
        None => FileValues::empty(),
    };

    let data_dir = args
        .data_dir
        .clone()
        .or(file.get::<PathBuf>("data_dir")?)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!(
                "no data directory: pass --data-dir, set it in the config file, or set {DATA_DIR_ENV}"
            ))
        })?;

    let rate = pick(args.rate, file.get("rate")?, 0.125);
    let width_factor = pick(args.width_factor, file.get("width_factor")?, 2);
    let depth = pick(args.depth, file.get("depth")?, 1);
    let output_activation: Activation = pick(
        args.output_activation
            .as_deref()
            .map(Activation::from_str)
            .transpose()?,
        file.get("output_activation")?,
        Activation::Sigmoid,
    );
    // CIFAR-10 rasters are 32x32 grayscale once the first channel is taken.
    let arch = ArchitectureSpec::new(1024, rate, width_factor, depth, output_activation)?;

    let loss: LossKind = pick(
        args.loss.as_deref().map(LossKind::from_str).transpose()?,
        file.get("loss")?,
        LossKind::Ssim,
    );
    let weighting: WeightKind = pick(
        args.weighting
            .as_deref()
            .map(WeightKind::from_str)
            .transpose()?,
        file.get("weighting")?,
        WeightKind::LogVariance,
    );
    let monitor: MonitorKind = pick(
        args.monitor
            .as_deref()
            .map(MonitorKind::from_str)
            .transpose()?,
        file.get("monitor")?,
        MonitorKind::Validation,
    );

    let out_dir = pick(
        args.out_dir.clone(),
        file.get("out_dir")?,
        PathBuf::from("out"),
    );

    let mut config = TrainConfig::new(arch);
    config.loss = loss;
    config.weighting = weighting;
    config.window = pick(args.window, file.get("window")?, config.window);
    config.learning_rate = pick(
        args.learning_rate,
        file.get("learning_rate")?,
        config.learning_rate,
    );
    config.batch_size = pick(args.batch_size, file.get("batch_size")?, config.batch_size);
    config.patience = pick(args.patience, file.get("patience")?, config.patience);
    config.max_epochs = pick(args.max_epochs, file.get("max_epochs")?, config.max_epochs);
    config.seed = pick(args.seed, file.get("seed")?, config.seed);
    config.monitor = monitor;
    config.reproducible = pick(args.reproducible, file.get("reproducible")?, true);
    config.cache_reference_stats = pick(
        args.cache_reference_stats,
        file.get("cache_reference_stats")?,
        false,
    );
    config.val_fraction = pick(
        args.val_fraction,
        file.get("val_fraction")?,
        config.val_fraction,
    );
    config.subset_train = args.subset_train.or(file.get("subset_train")?);
    config.subset_test = args.subset_test.or(file.get("subset_test")?);
    config.data_dir = Some(data_dir.clone());
    config.out_dir = Some(out_dir.clone());
    config.validate()?;

    Ok(TrainSettings {
        config,
        data_dir,
        out_dir,
    })
}

fn resolve_data_dir(flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!(
                "no data directory: pass --data-dir or set {DATA_DIR_ENV}"
            ))
        })
}

fn truncate<T>(mut items: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(k) = limit {
        items.truncate(k);
    }
    items
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let settings = resolve_train(args)?;
    let config = &settings.config;

    let train_raw = truncate(
        load_cifar10(&settings.data_dir, Split::Train)?,
        config.subset_train,
    );
    let test = truncate(
        load_cifar10(&settings.data_dir, Split::Test)?,
        config.subset_test,
    );
    let manifest = make_manifest(
        train_raw,
        test,
        config.val_fraction,
        sub_seed(config.seed, "split"),
    )?;
    println!("dataset {}", manifest.source);

    std::fs::create_dir_all(&settings.out_dir).map_err(|e| Error::file(&settings.out_dir, e))?;
    let log_path = settings.out_dir.join("train.log");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::file(&log_path, e))?;

    let params = crate::network::init_params(&config.arch, sub_seed(config.seed, "init"));
    let (checkpoint, _log) = train_streaming(config, &manifest, params, &mut |entry| {
        let line = entry.to_line();
        println!("{line}");
        // Log write failures should not abort a long training run.
        let _ = writeln!(log_file, "{line}");
    })?;

    let ckpt_path = settings.out_dir.join("checkpoint.txt");
    save_checkpoint(&checkpoint, &ckpt_path)?;
    println!("checkpoint {}", ckpt_path.display());
    println!("best_epoch {}", checkpoint.epoch);

    if !manifest.test.is_empty() {
        let report = evaluate(&checkpoint.params, &manifest.test, config.window)?;
        println!("loss {}", config.loss);
        println!("weighting {}", config.weighting);
        println!("rate {}", config.arch.rate);
        println!("ssim_score {}", report.mean_ssim);
        println!("mse_score {}", report.mean_mse);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let data_dir = resolve_data_dir(&args.data_dir)?;
    let test = truncate(load_cifar10(&data_dir, Split::Test)?, args.subset_test);
    let window = args
        .window
        .or_else(|| {
            checkpoint
                .config_value("window")
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(8);
    let report = evaluate(&checkpoint.params, &test, window)?;
    println!("ssim_score {}", report.mean_ssim);
    println!("mse_score {}", report.mean_mse);
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let data_dir = resolve_data_dir(&args.data_dir)?;
    let test = load_cifar10(&data_dir, Split::Test)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::file(&args.out_dir, e))?;
    for (i, img) in test.iter().take(args.count).enumerate() {
        let recon = reconstruct(&checkpoint.params, img)?;
        let path = args.out_dir.join(format!("recon_{i:04}.pgm"));
        save_pgm(&recon, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let outcomes = gradcheck::run_all(args.seed, args.pairs)?;
    let mut all_passed = true;
    for o in &outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        println!(
            "gradcheck {}: {status} max_rel_err {:.3e} max_abs_dev {:.3e} tolerance {:.0e} checked {}",
            o.name, o.report.max_rel_err, o.report.max_abs_dev, o.tolerance, o.report.checked
        );
        all_passed &= o.passed();
    }
    if all_passed {
        Ok(())
    } else {
        Err(Error::Numeric("gradient checks failed".into()))
    }
}

fn cmd_export_phi(args: &ExportPhiArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let phi = extract_sensing_matrix(&checkpoint.params);
    save_matrix("phi", &phi, &args.out)?;
    println!(
        "wrote {} ({}x{})",
        args.out.display(),
        phi.nrows(),
        phi.ncols()
    );
    Ok(())
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportPhi(args) => cmd_export_phi(args),
    }
}

/// Round-trip helper used by tests: load a matrix written by `export-phi`.
pub fn read_exported_matrix(path: &Path) -> Result<(String, ndarray::Array2<f64>)> {
    load_matrix(path)
}
