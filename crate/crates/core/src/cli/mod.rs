//! Command-line driver. `main.rs` only forwards to [`main_with_args`].
//!
//! Exit codes: 0 success, 1 invariant or losslessness failure, 2 usage,
//! config or trace error.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::batch::BatchError;
use crate::pipeline::{Mode, PipelineError};

pub use config::{
    DraftSection, ModelSection, OutputSection, PipelineSection, RunConfig, ServeSection,
    SweepSection,
};

#[derive(Debug, Parser)]
#[command(
    name = "specpipe",
    version,
    about = "Pipelined tree-speculative decoding simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode one prompt and check the output against sequential decoding.
    Decode(DecodeArgs),
    /// Grid over tree width and candidates per node; reports TBT and accuracy.
    Sweep(SweepArgs),
    /// Serve a multi-request workload at several batch sizes.
    Serve(ServeArgs),
    /// Decode with draft candidates read from a recorded trace.
    Replay(ReplayArgs),
    /// Check a config, optionally running the oracle regression corpus.
    Validate(ValidateArgs),
}

/// Flags shared by every command; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// specpipe or vanilla-pp.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// JSON cost model replacing the config's.
    #[arg(long)]
    pub cost_model: Option<PathBuf>,
    #[arg(long)]
    pub stages: Option<usize>,
    /// Tree width.
    #[arg(long, short = 'w')]
    pub width: Option<usize>,
    /// Candidates per frontier node.
    #[arg(long, short = 'k')]
    pub k: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub miss_prob: Option<f64>,
    /// One thread per stage.
    #[arg(long)]
    pub workers: bool,
    /// Overlap pruning with transmission.
    #[arg(long)]
    pub overlap: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OutputArgs {
    /// Per-stage timeline CSV.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Metrics JSON.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Emitted tokens as JSON.
    #[arg(long)]
    pub tokens_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Save every draft call as a JSON Lines trace for `replay`.
    #[arg(long)]
    pub record_draft: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Draft trace (JSON Lines).
    pub trace: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Tokens decoded per grid point.
    #[arg(long)]
    pub sweep_tokens: Option<usize>,
    /// Accuracy curve JSON used for the recommendation instead of the fit.
    #[arg(long)]
    pub accuracy_curve: Option<PathBuf>,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSON Lines: {arrival_step, prompt_tokens, max_new_tokens}.
    #[arg(long)]
    pub workload: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub w_total: Option<usize>,
    #[arg(long)]
    pub max_nodes: Option<usize>,
    /// Report JSON destination.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Decode a corpus of seeds and prompts and compare with the oracle.
    #[arg(long)]
    pub check_oracle: bool,
    /// Corpus size for --check-oracle.
    #[arg(long, default_value_t = 24)]
    pub runs: usize,
    #[arg(long)]
    pub accuracy_curve: Option<PathBuf>,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }

    pub fn invariant(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_invariant() {
            Failure::invariant(e)
        } else {
            Failure::usage(e)
        }
    }
}

impl From<BatchError> for Failure {
    fn from(e: BatchError) -> Self {
        if e.is_invariant() {
            Failure::invariant(e)
        } else {
            Failure::usage(e)
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Decode(a) => commands::decode(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Serve(a) => commands::serve(a),
        Command::Replay(a) => commands::replay(a),
        Command::Validate(a) => commands::validate(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}
