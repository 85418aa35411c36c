//! The `fsl` command line: data preparation, training, evaluation and grids.
//!
//! Every command writes its artifacts atomically and, with a fixed `--seed`,
//! produces byte-identical files on every run.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use fsl_core::data::{DataError, Embedder};
use fsl_core::models::{ModelError, ModelKind};
use fsl_core::parallel::Execution;
use fsl_core::training::TrainingError;

pub use commands::{cmd_eval, cmd_grid, cmd_split, cmd_synth, cmd_train, cmd_validate, read_grid_collections};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("collection failed validation with {0} violation(s)")]
    Invalid(usize),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "fsl", version, about = "Episodic few-shot slot tagging over precomputed token vectors")]
#[command(after_help = "Set FSL_LOG to error, info (default) or debug to control progress output on stderr.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a collection against the format invariants.
    Validate(ValidateArgs),
    /// Build leave-one-domain-out train/test collections from per-domain collections.
    Split(SplitArgs),
    /// Meta-train a model and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Meta-test a checkpoint on a collection of unseen labels.
    Eval(EvalArgs),
    /// Run a (domain, embedder, model, K, size) experiment grid and render reports.
    Grid(GridArgs),
    /// Generate a Gaussian-cluster collection.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum ExecutionArg {
    Serial,
    #[default]
    Parallel,
}

impl From<ExecutionArg> for Execution {
    fn from(e: ExecutionArg) -> Self {
        match e {
            ExecutionArg::Serial => Execution::Serial,
            ExecutionArg::Parallel => Execution::Parallel,
        }
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Collection directory (manifest.json + triplets.jsonl).
    #[arg(long)]
    pub collection: PathBuf,
    /// JSON object mapping each label to its domain; enables the domain-membership check.
    #[arg(long)]
    pub label_domains: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Directory holding one collection subdirectory per domain, named after the domain.
    #[arg(long)]
    pub collection: PathBuf,
    /// Train-collection sizes (values kept per label); repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 100, 200])]
    pub size: Vec<usize>,
    /// Values per label in each test collection.
    #[arg(long, default_value_t = 200)]
    pub test_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output root; receives `<domain>/{split.json,train-<size>,test-<test-size>}`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EpisodeArgs {
    /// Classes per episode.
    #[arg(long, default_value_t = 5)]
    pub c_way: usize,
    /// Support examples per class.
    #[arg(long, default_value_t = 5)]
    pub k_shot: usize,
    /// Query examples per class [default: same as --k-shot].
    #[arg(long)]
    pub queries: Option<usize>,
    /// Episodes per evaluation.
    #[arg(long, default_value_t = 1000)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training collection directory.
    #[arg(long)]
    pub collection: PathBuf,
    /// Collection of unseen labels to evaluate on every --eval-every episodes.
    #[arg(long)]
    pub test_collection: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    pub model: ModelKind,
    /// Expected embedder of the collections; checked against their manifests.
    #[arg(long, value_parser = parse_embedder)]
    pub embedder: Option<Embedder>,
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    /// Meta-training episodes.
    #[arg(long, default_value_t = 10_000)]
    pub train_episodes: usize,
    /// Evaluation interval in episodes; must divide --train-episodes.
    #[arg(long, default_value_t = 500)]
    pub eval_every: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, value_enum, default_value_t = ExecutionArg::Parallel)]
    pub execution: ExecutionArg,
    /// Output directory for checkpoint.json, loss_curve.csv and eval.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `fsl train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Collection of labels unseen during training.
    #[arg(long)]
    pub test_collection: PathBuf,
    #[arg(long, value_parser = parse_embedder)]
    pub embedder: Option<Embedder>,
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    #[arg(long, value_enum, default_value_t = ExecutionArg::Parallel)]
    pub execution: ExecutionArg,
    /// Output directory for eval.csv and episodes.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// JSON grid spec: domains, embedders, models, k_shots, optional sizes and train schedule.
    #[arg(long)]
    pub spec: PathBuf,
    /// Root laid out as `<embedder>/<domain>/{train-<size>,test-200}`.
    #[arg(long)]
    pub collection: PathBuf,
    /// Overrides the spec's training episodes.
    #[arg(long)]
    pub train_episodes: Option<usize>,
    /// Overrides the spec's evaluation interval.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Overrides the spec's evaluation episodes.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ExecutionArg::Parallel)]
    pub execution: ExecutionArg,
    /// Output directory for grid.json, report.csv, report.md and published.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of classes (labels).
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Vector dimension.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Radius of the sphere holding the class means; 0 makes all classes coincide.
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    /// Values per class.
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `train/` and `test/` collections holding out this many labels.
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse()
}

fn parse_embedder(s: &str) -> std::result::Result<Embedder, String> {
    s.parse()
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(a) => cmd_validate(&a),
        Command::Split(a) => cmd_split(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    run(cli)
}
