mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vedit_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "vedit", version, about = "Latent diffusion forecasting of procedural clip embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic procedure dataset (manifest JSON plus blob).
    GenData(GenDataArgs),
    /// Train a model and classifier head on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a predictions file) and print a JSON report.
    Eval(EvalArgs),
    /// Sweep one axis over seeds on freshly generated synthetic data.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Number of tasks.
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Step vocabulary size.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Clips per procedure.
    #[arg(long)]
    pub len: Option<usize>,
    /// Channels per embedding token.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Tokens per clip.
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// `deterministic-cycle` or `markov`.
    #[arg(long)]
    pub transition: Option<String>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Attention heads; the head dimension is hidden / heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// `joint`, `self` or `cross`.
    #[arg(long)]
    pub attention: Option<String>,
    /// Denoising steps for both training and evaluation.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// `forecast`, `plan`, `task-classify` or `anticipate`.
    #[arg(long)]
    pub task: Option<String>,
    /// Planning horizon (intermediate steps).
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Observed clips for anticipation (default: all but the last Z).
    #[arg(long)]
    pub observed: Option<usize>,
    /// Steps to anticipate.
    #[arg(long = "Z")]
    pub z: Option<usize>,
    /// Candidate predictions per sample for anticipation.
    #[arg(long = "K")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Manifest path; the blob is written next to it with extension `.bin`.
    #[arg(long, default_value = "synthetic.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Dataset manifest written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and the CSV log.
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `cross-entropy` or `masked-recon`.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Score an existing predictions file instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Evaluate the training split instead of validation.
    #[arg(long)]
    pub train_split: bool,
    /// Also report top-1 with seen clips swapped between samples.
    #[arg(long)]
    pub shuffled_control: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// `attention`, `steps` or `layers`.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values (default: the axis' standard grid).
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Comma-separated seeds; each fixes data, initialisation and noise.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss(_) | Error::NonFiniteValue(_) => EXIT_NUMERICAL,
        Error::InvalidConfig(_)
        | Error::InvalidModelConfig(_)
        | Error::UnknownSweepAxis(_)
        | Error::InvalidSteps
        | Error::OddHeadDim(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
