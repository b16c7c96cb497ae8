//! Command-line front end: `generate`, `train`, `eval`, `sweep`, `trace`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{RunConfig, SplitConfig, OUTPUT_DIR_ENV};

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input files (exit 2).
    Usage(String),
    /// Anything that went wrong while doing the work (exit 1).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub(crate) fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "earlyclass", version, about = "Early classification of crop time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model; writes the best checkpoint and history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate over a grid of alphas and seeds.
    Sweep(SweepArgs),
    /// Per-time-step predictions of one sample.
    Trace(TraceArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output dataset CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Class catalogue JSON; the built-in nine-class catalogue when omitted.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Generator settings JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the class catalogue used.
    #[arg(long)]
    pub write_classes: Option<PathBuf>,
}

/// Overrides shared by `train` and `sweep`.
#[derive(Args, Debug, Default)]
pub struct RunOverrides {
    /// Dataset CSV (overrides the config).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossModeArg>,
    #[arg(long)]
    pub sequence_length: Option<usize>,
    #[arg(long)]
    pub micro_batch_size: Option<usize>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: RunOverrides,
    /// Earliness weight in [0, 1]; stored verbatim in the checkpoint.
    #[arg(long)]
    pub alpha: Option<String>,
    /// Start from the parameters of a model checkpoint.
    #[arg(long, conflicts_with = "resume")]
    pub init_from: Option<PathBuf>,
    /// Continue a run from its training-state file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: RunOverrides,
    /// Comma-separated alphas, e.g. 0.2,0.6,1.0.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub alphas: Vec<f64>,
    /// Seeds per alpha.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Worker threads; each trains one cell at a time.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossModeArg {
    EarlyReward,
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StopModeArg {
    Sampled,
    Expected,
    Final,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Which part of the dataset to score; splits are rebuilt from the
    /// checkpoint's split settings.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Defaults to `final` for cross-entropy checkpoints, `sampled` otherwise.
    #[arg(long, value_enum)]
    pub stop_mode: Option<StopModeArg>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Seed of the sampled stop rule.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class catalogue JSON, used for class names in the reports.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub sample_id: u64,
    /// Seed of the sampled stop.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use every raw observation instead of the checkpoint's sequence length.
    #[arg(long)]
    pub full: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Trace(a) => commands::trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
