//! `lqec`: spec-driven batch commands for the compensation laboratory.
//!
//! Exit codes: 0 success, 2 spec or usage error, 3 runtime or data error.

mod commands;
mod spec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use spec::{Command, ExperimentSpec, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Core(#[from] lqec::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Spec(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lqec", version, about = "Low-rank quantization error compensation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Build and train the full-precision teacher.
    Pretrain(CommonArgs),
    /// Quantize the teacher's decoder weights.
    Quantize(CommonArgs),
    /// Attach adapters and compensate quantization error.
    Compensate(CommonArgs),
    /// Fine-tune a student's adapters on a task corpus.
    Finetune(CommonArgs),
    /// Held-out perplexity of a checkpoint.
    Eval(CommonArgs),
    /// Write the requested analysis metrics as CSV (and optionally SVG).
    Analyze(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment spec (JSON).
    spec: PathBuf,
    /// Replace the spec's seed list (and model seed) with this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the spec.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Step count for the command's optimizer.
    #[arg(long)]
    steps: Option<usize>,
    /// Also render one SVG per reported metric.
    #[arg(long)]
    plots: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Quantize(a) => (Command::Quantize, a),
        Cmd::Compensate(a) => (Command::Compensate, a),
        Cmd::Finetune(a) => (Command::Finetune, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Analyze(a) => (Command::Analyze, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        steps: args.steps,
    };
    let result = ExperimentSpec::load(&args.spec, &overrides, command)
        .and_then(|spec| commands::run(command, &spec, args.plots));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
