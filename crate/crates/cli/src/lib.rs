//! The `nasforge` command line.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: config, flags, genotypes or missing artifacts.
    #[error("{0}")]
    Validation(String),
    /// Failure while running a valid command.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

pub(crate) fn invalid<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "nasforge", version, about = "Weight-sharing architecture search for CTR models")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for every randomized stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for candidate-level parallelism.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Search-space preset: full, small, codesign or desk.
    #[arg(long, global = true)]
    pub space: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic click log.
    SynthData(SynthArgs),
    /// Convert a Criteo-format TSV file into the dataset cache format.
    Ingest(IngestArgs),
    /// Train the weight-sharing supernet.
    TrainSupernet(TrainArgs),
    /// Regularized evolution over subnets scored by the supernet.
    Evolve(EvolveArgs),
    /// Retrain the best distinct searched architectures from scratch.
    SelectTop(SelectArgs),
    /// Correlate supernet scores with from-scratch losses.
    RankEval(RankArgs),
    /// Iterative mask-based or magnitude pruning of a trained model.
    Prune(PruneArgs),
    /// Crossbar cost of a genotype, or architecture/precision co-search.
    Cosim(CosimArgs),
    /// FLOPs and parameter count of a genotype.
    Flops(GenotypeArgs),
    /// Render a genotype as a Graphviz DOT graph.
    ExportDot(GenotypeArgs),
    /// Data, supernet training, evolution and selection end to end.
    Pipeline,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub dense: Option<usize>,
    #[arg(long)]
    pub sparse: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Tab-separated file: label, dense counts, hashed categorical tokens.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 13)]
    pub dense: usize,
    #[arg(long, default_value_t = 26)]
    pub sparse: usize,
    /// Hash buckets per sparse field.
    #[arg(long, default_value_t = nasforge_core::data::EMBEDDING_CAP)]
    pub vocab: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset cache file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Strategy {
    SingleOpSingleConn,
    AnyOpAnyConn,
    SingleOpAnyConn,
}

impl From<Strategy> for nasforge_core::SamplingStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::SingleOpSingleConn => Self::SingleOpSingleConn,
            Strategy::AnyOpAnyConn => Self::AnyOpAnyConn,
            Strategy::SingleOpAnyConn => Self::SingleOpAnyConn,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    /// Supernet checkpoint directory.
    #[arg(long)]
    pub supernet: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from the history already in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub tournament: Option<usize>,
    #[arg(long)]
    pub children: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Search history (JSON lines).
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub supernet: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of sampled subnets.
    #[arg(long)]
    pub n: Option<usize>,
    /// Fine-tune each subnet's head before scoring it.
    #[arg(long)]
    pub finetune: bool,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Model checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rank entries across all matrices instead of per matrix.
    #[arg(long)]
    pub global: bool,
    #[arg(long, value_enum, default_value_t = PruneVariant::Both)]
    pub variant: PruneVariant,
    /// Pruning rounds.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PruneVariant {
    Mask,
    Magnitude,
    Both,
}

#[derive(Debug, Args)]
pub struct CosimArgs {
    /// Cost a single genotype instead of searching.
    #[arg(long)]
    pub genotype: Option<PathBuf>,
    #[arg(long, required_unless_present = "genotype")]
    pub supernet: Option<PathBuf>,
    #[arg(long, required_unless_present = "genotype")]
    pub data: Option<PathBuf>,
    /// Hardware config (JSON); defaults to the run config's `hw` section.
    #[arg(long)]
    pub hw: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenotypeArgs {
    /// Genotype JSON file.
    #[arg(long)]
    pub genotype: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
