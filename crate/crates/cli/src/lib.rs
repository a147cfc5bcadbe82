//! `fsgcc` command line: simulate → train → evaluate → report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod evaluate;
pub mod report;

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fsgcc_core::dataset::{generate_pairs, load_pairs, DatasetManifest, ExperimentConfig, MANIFEST_FILE};
use fsgcc_core::metrics::Method;
use fsgcc_core::unet::{train, TrainConfig, UNetArchitecture, UNetModel, REFERENCE_PARAMETER_COUNT};

use crate::evaluate::{evaluate_dataset, CellReport};

pub const THREADS_ENV: &str = "FSGCC_THREADS";
pub const MODEL_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl Display) -> Self {
        Self::Runtime(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

/// The single JSON configuration document; every section optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: Option<ExperimentConfig>,
    pub train: Option<TrainConfig>,
    pub architecture: Option<UNetArchitecture>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "fsgcc", version, about = "FS-GCC time-delay estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a dataset of simulated microphone pairs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the denoising network on a simulated dataset.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate delays on an evaluation dataset and tabulate the metrics.
    Evaluate {
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "gcc,svd,wsvd,cnn")]
        methods: Vec<Method>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw SVG charts from a results CSV.
    Report {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Metadata written next to every results CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub cells: Vec<CellReport>,
    pub manifest_sha256: String,
    pub seed: u64,
    pub version: String,
    pub unix_time_s: u64,
    pub wall_clock_s: f64,
}

pub fn version_string() -> String {
    format!("fsgcc-cli v{}", env!("CARGO_PKG_VERSION"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(CliError::runtime)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn dir_bytes(dir: &Path) -> u64 {
    let Ok(entries) = fs::read_dir(dir) else { return 0 };
    entries
        .flatten()
        .map(|e| match e.metadata() {
            Ok(m) if m.is_dir() => dir_bytes(&e.path()),
            Ok(m) => m.len(),
            Err(_) => 0,
        })
        .sum()
}

pub fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<DatasetManifest, CliError> {
    let t0 = Instant::now();
    let mut cfg = RunConfig::load(config)?.experiment.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = generate_pairs(&cfg, out).map_err(CliError::runtime)?;
    println!(
        "simulated {} examples ({} frames, {} skipped) into {}: {} bytes in {:.1} s",
        manifest.examples.len(),
        manifest.frame_total(),
        manifest.skipped.len(),
        out.display(),
        dir_bytes(out),
        t0.elapsed().as_secs_f64()
    );
    Ok(manifest)
}

fn history_csv(history: &fsgcc_core::unet::TrainHistory) -> String {
    use report::sig6;
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in &history.epochs {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, sig6(e.train_loss), sig6(e.val_loss), sig6(e.lr)));
    }
    s
}

pub fn cmd_train(dataset: &Path, out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<UNetModel, CliError> {
    let t0 = Instant::now();
    let run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut tc = run.train.unwrap_or_default();
    if let Some(s) = seed {
        tc.seed = s;
    }
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let arch = run.architecture.unwrap_or_else(UNetArchitecture::reference);
    let manifest = DatasetManifest::load(dataset).map_err(CliError::runtime)?;
    let pairs = load_pairs(dataset, &manifest).map_err(CliError::runtime)?;
    if pairs.is_empty() {
        return Err(CliError::Runtime(format!("dataset {} has no training pairs", dataset.display())));
    }
    let model = UNetModel::new(arch.clone(), tc.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "architecture: encoder {:?}, decoder {:?}, kernel {}x{}",
        arch.encoder_filters, arch.decoder_filters, arch.kernel.0, arch.kernel.1
    );
    println!(
        "trainable parameters: {} (reference {REFERENCE_PARAMETER_COUNT})",
        model.parameter_count()
    );
    let (best, history) = train(model, &pairs, &tc, |e| {
        println!(
            "epoch {:>3}  train {:.6e}  val {:.6e}  lr {:.3e}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        );
        let _ = std::io::stdout().flush();
    })
    .map_err(CliError::runtime)?;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    best.save(&out.join(MODEL_FILE)).map_err(CliError::runtime)?;
    write_file(&out.join(HISTORY_FILE), history_csv(&history).as_bytes())?;
    println!(
        "best epoch {} of {}{}; saved {} in {:.1} s",
        history.best_epoch,
        history.epochs.len(),
        if history.early_stopped { " (early stop)" } else { "" },
        out.join(MODEL_FILE).display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(best)
}

/// Path of the JSON run report written beside `csv`.
pub fn report_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn cmd_evaluate(dataset: &Path, methods: &[Method], model: Option<&Path>, out: &Path) -> Result<RunReport, CliError> {
    let t0 = Instant::now();
    if methods.is_empty() {
        return Err(CliError::Usage("--methods is empty".into()));
    }
    if methods.contains(&Method::Cnn) && model.is_none() {
        return Err(CliError::Usage("the cnn method needs --model".into()));
    }
    let manifest_bytes = fs::read(dataset.join(MANIFEST_FILE))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dataset.join(MANIFEST_FILE).display())))?;
    let manifest = DatasetManifest::load(dataset).map_err(CliError::runtime)?;
    let net = model.map(UNetModel::load).transpose().map_err(CliError::runtime)?;
    let cells = evaluate_dataset(dataset, &manifest, methods, net.as_ref())?;
    write_file(out, report::to_csv(&cells).as_bytes())?;
    let run = RunReport {
        cells,
        manifest_sha256: sha256_hex(&manifest_bytes),
        seed: manifest.config.seed,
        version: version_string(),
        unix_time_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_vec_pretty(&run).map_err(CliError::runtime)?;
    write_file(&report_path(out), &json)?;
    println!(
        "evaluated {} frames × {} methods into {} in {:.1} s",
        manifest.frame_total(),
        methods.len(),
        out.display(),
        run.wall_clock_s
    );
    Ok(run)
}

/// Returns the written chart paths; none (with a warning) for a table without rows.
pub fn cmd_report(csv: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(csv).map_err(|e| CliError::Runtime(format!("{}: {e}", csv.display())))?;
    let rows = report::parse_csv(&text)?;
    let charts = report::charts(&rows);
    if charts.is_empty() {
        eprintln!("warning: {} has no result rows; no charts written", csv.display());
        return Ok(Vec::new());
    }
    let mut written = Vec::new();
    for (name, svg) in charts {
        let p = out.join(name);
        write_file(&p, svg.as_bytes())?;
        written.push(p);
    }
    println!("wrote {} charts to {}", written.len(), out.display());
    Ok(written)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let pool = thread_pool()?;
    pool.install(|| match cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed).map(drop),
        Command::Train {
            dataset,
            out,
            config,
            seed,
        } => cmd_train(&dataset, &out, config.as_deref(), seed).map(drop),
        Command::Evaluate {
            dataset,
            methods,
            model,
            out,
        } => cmd_evaluate(&dataset, &methods, model.as_deref(), &out).map(drop),
        Command::Report { csv, out } => cmd_report(&csv, &out).map(drop),
    })
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
