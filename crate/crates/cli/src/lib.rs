//! Command-line driver. Every command writes a `RunManifest` next to its
//! outputs; `replay` re-runs a manifest and reproduces the outputs bit for bit.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
pub mod manifest;

pub use manifest::RunManifest;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, malformed value, bad TAPERKIT_THREADS)
  3  I/O error (unreadable input, unwritable output)
  4  invalid input (bad config, checkpoint format, validation failure)
  5  verification failed (logit mismatch above tolerance)
  6  numeric failure (non-finite value during training or evaluation)

Environment:
  TAPERKIT_THREADS  worker cap for data-parallel sections (0 = serial)";

#[derive(Debug, Parser)]
#[command(name = "taperkit", version, about = "Extend a trained encoder's position table and measure extrapolation")]
#[command(after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Train a full-attention source model on the synthetic corpus.
    #[command(after_help = EXIT_CODES)]
    Pretrain(PretrainArgs),
    /// Build an extended target model from a source checkpoint.
    #[command(after_help = EXIT_CODES)]
    Transform(TransformArgs),
    /// Compare source and target logits on random inputs no longer than l_src.
    #[command(after_help = EXIT_CODES)]
    Verify(VerifyArgs),
    /// Masked-token perplexity of every variant at every length.
    #[command(after_help = EXIT_CODES)]
    PplSweep(PplSweepArgs),
    /// Attenuation factors and cross-copy distances of the extended table.
    #[command(after_help = EXIT_CODES)]
    InspectTaper(InspectTaperArgs),
    /// Attended-pair coverage of the sparse layout at each length.
    #[command(after_help = EXIT_CODES)]
    BenchAttention(BenchAttentionArgs),
    /// Re-run the command recorded in a manifest.
    #[command(after_help = EXIT_CODES)]
    Replay(ReplayArgs),
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// TOML file with optional [model], [corpus] and [training] tables; omitted tables use the desk-scale defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds corpus generation, initialization, batching, masking and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory: source.ckpt, loss.csv, eval_docs.txt, config.toml, manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct TransformArgs {
    #[arg(long)]
    pub src: PathBuf,
    /// taper, repeated or vanilla.
    #[arg(long, default_value = "taper")]
    pub variant: String,
    /// Temperature for the taper variant.
    #[arg(long, default_value_t = taperkit::taper::DEFAULT_TAU)]
    pub tau: f64,
    /// Seeds the fresh rows of the vanilla variant.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target maximum length; defaults to the source config's l_tgt.
    #[arg(long)]
    pub l_tgt: Option<usize>,
    /// TOML file with a [sparse] table for the target layout; defaults to block 16, 1 global, window 3, 1 random.
    #[arg(long)]
    pub sparse_config: Option<PathBuf>,
    /// Random inputs checked for logit consistency after the transform (0 skips the check).
    #[arg(long, default_value_t = 100)]
    pub check_samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub check_tol: f64,
    /// Output directory: target.ckpt, report.json, manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Evaluation precision; checkpoints are f32 and are widened for f64.
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Longest sampled input; defaults to l_src.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report (and manifest.json beside it) instead of only printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct PplSweepArgs {
    #[arg(long)]
    pub src: PathBuf,
    /// One document per line, space-separated token ids; defaults to eval_docs.txt beside the source checkpoint.
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,192,256")]
    pub lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "vanilla,repeated,taper:1.0,taper:2.0,taper:4.0")]
    pub variants: Vec<String>,
    /// Seeds masking and the vanilla rows.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate at most this many packed sequences per length.
    #[arg(long)]
    pub max_sequences: Option<usize>,
    /// CSV output; the manifest goes to <out>.manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct InspectTaperArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long, default_value_t = taperkit::taper::DEFAULT_TAU)]
    pub tau: f64,
    /// Target maximum length; defaults to the source config's l_tgt.
    #[arg(long)]
    pub l_tgt: Option<usize>,
    /// Output directory: factors.csv, distinguishability.csv, distinguishability_repeated.csv, manifest.json. Without it the tables go to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct BenchAttentionArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
    pub lengths: Vec<usize>,
    /// TOML file with a [sparse] table (a target model config works); defaults to block 16, 1 global, window 3, 1 random.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV output (manifest at <out>.manifest.json); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, clap::Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Redirect the outputs of the replayed command here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] taperkit::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: max abs diff {max_abs_diff:e} exceeds {tol:e}")]
    Verification { max_abs_diff: f64, tol: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use taperkit::Error as E;
        match self {
            CliError::Core(E::Io(_)) | CliError::Io { .. } => EXIT_IO,
            CliError::Core(E::NonFinite { .. }) => EXIT_NUMERIC,
            CliError::Core(_) | CliError::Invalid(_) => EXIT_INVALID,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verification { .. } => EXIT_VERIFY,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Worker cap from `TAPERKIT_THREADS`; unset means the default pool.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var("TAPERKIT_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("TAPERKIT_THREADS: {e}"))),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("TAPERKIT_THREADS must be a non-negative integer, got {v:?}"))),
    }
}

pub fn run(command: Command) -> CliResult<()> {
    let threads = threads_from_env()?;
    taperkit::exec::with_threads(threads, || commands::dispatch(command, threads))
}
