//! `triseg`: synthesize phantoms, train, evaluate, predict and report.
//!
//! Exit codes: 0 success, 1 usage, 2 data fault, 3 runtime or numeric fault.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "triseg", version, about = "Three-channel CNN tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset (images/ and masks/ PGM pairs).
    Synth(SynthArgs),
    /// Preprocess, split 80/20, train and write the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test partition of a dataset.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
    /// Summarize a metrics CSV into boxplot-ready files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    /// Side of the square source images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` phantom spec; flags given explicitly override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    axis_min: Option<f64>,
    #[arg(long)]
    axis_max: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    texture_scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Bce,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

/// `--roi auto` or `--roi manifest FILE`.
#[derive(Debug, Args)]
struct RoiArgs {
    #[arg(long, num_args = 1..=2, value_names = ["MODE", "FILE"], default_value = "auto")]
    roi: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LossArg::Bce)]
    loss: LossArg,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    batch: u32,
    /// Epochs without test-IoU improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 10)]
    patience: u32,
    /// Per-epoch CSV log; defaults to the checkpoint path with `.csv` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    roi: RoiArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Directory for per-sample PPM overlays.
    #[arg(long)]
    overlays: Option<PathBuf>,
    #[command(flatten)]
    roi: RoiArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the 16-bit probability map instead of the binary mask.
    #[arg(long)]
    prob: bool,
    /// Top-left corner `Y,X` of the 100x100 window; defaults to the center.
    #[arg(long, value_parser = parse_origin)]
    roi_origin: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_origin(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or_else(|| format!("expected Y,X, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(y)?, n(x)?))
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
