//! The `cycletrack` command line: synthesis, training, tracking, mask
//! propagation and evaluation.
//!
//! Configuration precedence is `--set` flags over `--config` files over
//! built-in defaults.

mod commands;
mod render;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cycletrack_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cycletrack", version, about = "Self-supervised Siamese tracking and mask propagation")]
pub struct Cli {
    /// Log more (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of moving shapes.
    Synth(SynthArgs),
    /// Train a model with cycle-consistent self-supervision.
    Train(TrainArgs),
    /// Track the first-frame box through each sequence.
    Track(TrackArgs),
    /// Propagate first-frame instance masks through each sequence.
    Propagate(PropagateArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset root with one sequence folder per sequence.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Directory for checkpoints and `metrics.jsonl`.
    #[arg(long, value_name = "DIR", default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Dataset root or a single sequence folder.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Sequences processed in parallel.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    /// Also write per-frame overlay images under `<out>/render/<sequence>/`.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write minimum-area rotated boxes fitted to the predicted mask (needs a mask model).
    #[arg(long)]
    pub rotated: bool,
    /// Run the reset protocol against ground truth and write status codes.
    #[arg(long)]
    pub reset: bool,
}

#[derive(Debug, Args)]
pub struct PropagateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Vot,
    Davis,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Prediction directory written by `track` or `propagate`.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Dataset root with full ground truth.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Report directory; defaults to the prediction directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Row label in the report.
    #[arg(long, default_value = "cycletrack")]
    pub name: String,
    /// Window lengths averaged into EAO, as `LO,HI`.
    #[arg(long, value_name = "LO,HI", default_value = "1,100")]
    pub eao_range: String,
    /// Boundary tolerance in pixels; defaults to 0.8% of the frame diagonal.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 on success, 1 on usage errors and 2 on
/// runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Track(a) => commands::track(a),
        Command::Propagate(a) => commands::propagate(a),
        Command::Eval(a) => commands::eval(a),
    }
}
