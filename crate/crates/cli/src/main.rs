mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pqmotion::Error),

    #[error("missing artifact {} (run `{producer}` first)", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("{} already exists; pass --force to overwrite it", path_display(.0))]
    Exists(PathBuf),

    #[error("{0}")]
    Usage(String),
}

fn path_display(p: &std::path::Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Parser)]
#[command(name = "pqmotion", version, about = "Audio-driven holistic motion synthesis with product-quantized codes")]
pub struct Cli {
    /// JSON run configuration (defaults to the desk profile).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Run directory holding all artifacts.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Keep an existing stage checkpoint and adopt its configuration.
    #[arg(long, global = true)]
    pub resume: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    TrainPqvae,
    TrainPredictor,
    TrainRefiner,
    /// Sample motion for one test sequence's audio.
    Synth(SynthArgs),
    /// Fill the middle of a test sequence given its first and last frames.
    Complete(CompleteArgs),
    /// Metrics on the test split.
    Eval(DecodeArgs),
    /// Decode throughput.
    Bench(BenchArgs),
    /// Ablation grids.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Decoding iterations (defaults to the trained predictor's schedule).
    #[arg(long = "T")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    pub sequence: usize,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long, default_value_t = 0)]
    pub sequence: usize,
    /// Known frames at the start.
    #[arg(long, default_value_t = 16)]
    pub prefix: usize,
    /// Known frames at the end.
    #[arg(long, default_value_t = 16)]
    pub suffix: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Ar,
    Maskgit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Predictor,
    Pipeline,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub mode: BenchMode,
    #[arg(long = "T", default_value_t = 8)]
    pub iterations: usize,
    /// Sequence length (defaults to eval.bench_frames).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Timed runs (defaults to eval.bench_runs).
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Scope::Predictor)]
    pub scope: Scope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Table {
    /// Codebook size × groups (reconstruction error).
    GSweep,
    /// Decoding iterations plus the autoregressive baseline.
    TSweep,
    /// Positional encoding variants.
    Pe,
    /// Condition ablation.
    Conditions,
    All,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub table: Table,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
