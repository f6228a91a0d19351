//! Command-line interface for the rotated-ellipse detection pipeline.
//!
//! One binary, subcommand style: dataset generation, training, evaluation,
//! direct ellipse fitting, IoU diagnostics, and overlay rendering. A TOML
//! run-configuration file provides defaults; explicit flags override it,
//! and every training run writes its fully resolved config alongside its
//! other artifacts. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod overlay;

use clap::{Args, Parser, Subcommand};
use ellipsedet::detector::{CheckpointError, DetectorError, TrainError};
use ellipsedet::encoding::{DecodeError, EncodeError};
use ellipsedet::fit::FitError;
use ellipsedet::geometry::GeometryError;
use ellipsedet::synth::{DatasetError, SynthError};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Debug)]
pub enum CliError {
    /// Bad command line (exit 1).
    Usage(String),
    /// Unreadable, malformed, or semantically invalid inputs (exit 2).
    Data(String),
    /// Non-finite objective or loss (exit 3).
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            FitError::Geometry(g) => CliError::Data(g.to_string()),
        }
    }
}

macro_rules! data_error_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error_from!(
    DatasetError,
    SynthError,
    GeometryError,
    EncodeError,
    DecodeError,
    DetectorError,
    CheckpointError,
    io::Error
);

/// Five comma-separated ellipse parameters: cx,cy,a,b,theta (radians).
#[derive(Debug, Clone, Copy)]
pub struct EllipseArg(pub [f64; 5]);

impl FromStr for EllipseArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 5 {
            return Err(format!("expected cx,cy,a,b,theta (5 numbers), got {}", parts.len()));
        }
        let mut vals = [0.0; 5];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}"))?;
        }
        Ok(EllipseArg(vals))
    }
}

impl EllipseArg {
    /// Validates the parameters; violations surface as data errors naming
    /// the broken invariant.
    pub fn build(&self) -> Result<ellipsedet::Ellipse, CliError> {
        let [cx, cy, a, b, theta] = self.0;
        Ok(ellipsedet::Ellipse::new(cx, cy, a, b, theta)?)
    }
}

/// A class-tagged ellipse: `thorax:cx,cy,a,b,theta` or `heart:...`
/// (class indices 0 and 1 also accepted).
#[derive(Debug, Clone, Copy)]
pub struct ClassedEllipseArg {
    pub class_id: usize,
    pub params: EllipseArg,
}

impl FromStr for ClassedEllipseArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (cls, rest) = s
            .split_once(':')
            .ok_or_else(|| "expected class:cx,cy,a,b,theta".to_string())?;
        let class_id = match cls.trim() {
            "thorax" | "0" => 0,
            "heart" | "1" => 1,
            other => return Err(format!("unknown class {other:?} (thorax/heart or 0/1)")),
        };
        Ok(ClassedEllipseArg { class_id, params: rest.parse()? })
    }
}

#[derive(Parser)]
#[command(
    name = "ellipsedet",
    version,
    about = "Rotated-ellipse detection: synthetic scenes, training, evaluation, biometrics"
)]
struct Cli {
    /// TOML run-configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads. Only 1 is supported; the pipeline is fully
    /// deterministic single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: train/ and test/ splits plus manifest.
    Gen(GenArgs),
    /// Train the detector; writes config, logs, checkpoints, and history
    /// into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the encode/decode oracle) on a split.
    Eval(EvalArgs),
    /// Fit one ellipse to a target by gradient descent on the combined
    /// regression + IoU objective.
    Fit(FitArgs),
    /// Print IoU diagnostics for a pair of ellipses.
    Iou(IouArgs),
    /// Render ground-truth and predicted ellipses over a scene.
    Overlay(OverlayArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Total scene count (overrides config).
    #[arg(long)]
    count: Option<usize>,
    /// Fraction of scenes in the train split (overrides config).
    #[arg(long)]
    train_frac: Option<f64>,
    /// Master seed (overrides config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Run directory for config, logs, checkpoints, and reports.
    #[arg(long, value_name = "DIR", default_value = "run")]
    run: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Validate every N epochs (0: final epoch only).
    #[arg(long)]
    eval_every: Option<usize>,
    /// IoU loss weight; 0 disables the IoU term (ablation).
    #[arg(long)]
    lambda_iou: Option<f64>,
    /// Zero the per-parameter ellipse regression weight, training the
    /// shape through the IoU term alone (ablation).
    #[arg(long)]
    only_iou: bool,
    /// Disable all augmentations.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Split directory (e.g. dataset/test).
    #[arg(long, value_name = "DIR")]
    split: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE", conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the encode/decode round trip of the ground truth instead of
    /// a network (pipeline-integrity canary).
    #[arg(long)]
    oracle: bool,
    /// Run directory; reports land in <run>/reports/.
    #[arg(long, value_name = "DIR", default_value = "run")]
    run: PathBuf,
    #[arg(long)]
    score_threshold: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    /// Target ellipse: cx,cy,a,b,theta.
    #[arg(long)]
    target: EllipseArg,
    /// Initial ellipse; omit to sample one inside the target's extended
    /// square from --init-seed.
    #[arg(long)]
    init: Option<EllipseArg>,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
    #[arg(long)]
    lambda_iou: Option<f64>,
    /// Print the objective every N executed steps.
    #[arg(long, default_value_t = 200)]
    trace_every: usize,
    /// Write the full trace and fitted parameters as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct IouArgs {
    /// First ellipse: cx,cy,a,b,theta.
    #[arg(long)]
    e1: EllipseArg,
    /// Second ellipse: cx,cy,a,b,theta.
    #[arg(long)]
    e2: EllipseArg,
    /// Grid resolution for the rasterized ellipse-IoU oracle.
    #[arg(long, default_value_t = 1024)]
    resolution: usize,
}

#[derive(Args)]
struct OverlayArgs {
    /// Split directory to pull the scene and ground truth from.
    #[arg(long, value_name = "DIR", required_unless_present = "image")]
    split: Option<PathBuf>,
    /// Scene index within the split.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Explicit graymap input (alternative to --split).
    #[arg(long, value_name = "FILE", conflicts_with = "split")]
    image: Option<PathBuf>,
    /// Ground-truth ellipse, repeatable (required with --image).
    #[arg(long = "gt", value_name = "ELLIPSE")]
    gt: Vec<EllipseArg>,
    /// Predict with this checkpoint instead of explicit --pred ellipses.
    #[arg(long, value_name = "FILE", conflicts_with = "pred")]
    checkpoint: Option<PathBuf>,
    /// Predicted ellipse as class:cx,cy,a,b,theta, repeatable.
    #[arg(long = "pred", value_name = "CLASS:ELLIPSE")]
    pred: Vec<ClassedEllipseArg>,
    /// Output pixel map (binary RGB, P6).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optional vector sidecar.
    #[arg(long, value_name = "FILE")]
    svg: Option<PathBuf>,
    #[arg(long)]
    score_threshold: Option<f64>,
}

/// Duplicates log lines to stderr and the run log file.
struct Tee(fs::File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.0.flush()
    }
}

/// Stderr logging at info level by default (RUST_LOG overrides), without
/// timestamps so run logs stay byte-reproducible. Training runs tee their
/// log into the run directory.
fn init_logging(log_file: Option<&PathBuf>) -> Result<(), CliError> {
    let mut builder =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    builder.format_timestamp(None);
    if let Some(path) = log_file {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = fs::File::create(path)
            .map_err(|e| CliError::Data(format!("cannot open log {}: {e}", path.display())))?;
        builder.target(env_logger::Target::Pipe(Box::new(Tee(file))));
    }
    builder.init();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    if cli.threads > 1 {
        log::warn!("--threads {} requested; running single-threaded for determinism", cli.threads);
    }
    let config = config::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(args) => commands::cmd_gen(&args, config),
        Command::Train(args) => commands::cmd_train(&args, config),
        Command::Eval(args) => commands::cmd_eval(&args, config),
        Command::Fit(args) => commands::cmd_fit(&args, config),
        Command::Iou(args) => commands::cmd_iou(&args),
        Command::Overlay(args) => commands::cmd_overlay(&args, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse failures are usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let log_file = match &cli.command {
        Command::Train(t) => Some(t.run.join("run.log")),
        _ => None,
    };
    if let Err(e) = init_logging(log_file.as_ref()) {
        eprintln!("{e}");
        return ExitCode::from(e.exit_code());
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
