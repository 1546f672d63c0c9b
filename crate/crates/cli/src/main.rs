//! `segface`: data generation, training, evaluation, gradient checking,
//! inference and benchmarking.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "segface", version, about = "Face parsing with class-specific decoder tokens")]
pub struct Cli {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for parameter initialization and data order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr0=3e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render procedural scenes into a dataset directory and report class frequencies.
    GenData {
        /// Number of scenes [default: data.train_count].
        #[arg(long)]
        count: Option<usize>,
        /// Index of the first scene, e.g. to render a held-out split.
        #[arg(long, default_value_t = 0)]
        start: u64,
    },
    /// Train a model; writes checkpoint.bin, metrics.jsonl and config.toml.
    Train,
    /// Evaluate a checkpoint and print the per-class report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which configured split to evaluate.
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Evaluate this dataset directory instead of the configured split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences for every op, module and the full loss.
    Gradcheck,
    /// Write argmax masks, colorized overlays and optional per-token maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write one grayscale map per class token.
        #[arg(long)]
        token_maps: bool,
        /// Image files or directories of images.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Measure inference throughput in images per second.
    Bench {
        /// Weights to use; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

/// Exit code 1: bad input or configuration. Exit code 2: the computation failed.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<segface_core::Error> for Failure {
    fn from(e: segface_core::Error) -> Self {
        match e {
            segface_core::Error::Checkpoint(_) => Failure::Invalid(e.to_string()),
            e if e.is_validation() => Failure::Invalid(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
