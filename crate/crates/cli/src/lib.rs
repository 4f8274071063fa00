//! `fbcc` command-line harness: dataset generation, training, evaluation
//! from checkpoints and ablation sweeps, each leaving a hashed manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{Imbalance, RunConfig, SEED_ENV};
pub use error::{CliError, Result};
pub use manifest::{Artifact, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "fbcc", version, about = "Continual clustering with forward/backward distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task stream.
    Generate(GenerateArgs),
    /// Train on a stream and write the report and per-task checkpoints.
    Train(TrainArgs),
    /// Recompute the metrics of a training run from its checkpoints.
    Eval(EvalArgs),
    /// Compare the default method with its three ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// JSON run config (a run manifest is accepted too).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Retention probabilities of the first and last task, e.g. `0.1:1.0`.
    #[arg(long, value_name = "P_FIRST:P_LAST")]
    pub imbalanced: Option<Imbalance>,
    /// Clusters of every task, e.g. `6,2,2,2`.
    #[arg(long, value_delimiter = ',', value_name = "LAMBDAS")]
    pub heterogeneous: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationFlags {
    /// Train without prototype repulsion.
    #[arg(long)]
    pub no_prototypes: bool,
    /// Train without distillation from stored students.
    #[arg(long)]
    pub no_kd: bool,
    /// Distill from a frozen copy of the previous teacher instead.
    #[arg(long)]
    pub single_frozen_teacher: bool,
    /// Student pool capacity.
    #[arg(long, value_name = "M")]
    pub students: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[command(flatten)]
    pub flags: AblationFlags,
    /// FBCD dataset; generated from the config when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the accuracy matrix as CSV to this path.
    #[arg(long, value_name = "CSV")]
    pub export_plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory, or its `checkpoints` subdirectory.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Config for assignment mode and alpha; defaults to the run's manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the metrics here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    pub export_plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Student pool capacity used by every row.
    #[arg(long, value_name = "M")]
    pub students: Option<usize>,
    /// FBCD dataset shared by every seed; generated per seed when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds shared by all rows; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Fail unless the default method forgets less than its no-KD ablation.
    #[arg(long)]
    pub assert_directional: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a).map(|_| ()),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a).map(|_| ()),
    }
}
