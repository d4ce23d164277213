//! `flownas` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | configuration or usage error (including dimension mismatches) |
//! | 3 | I/O error |
//! | 4 | parse error (pcap, dataset, architecture, weights, checkpoint) |
//! | 5 | search budget exhausted |
//! | 6 | training failed (diverged or non-finite activations) |

mod commands;
pub mod config;
pub mod labels;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use flownas_core::arch::ParseError;
use flownas_core::engine::{CheckpointError, EngineError};
use flownas_core::pcap::PcapError;
use flownas_core::quant::QuantError;
use flownas_core::search::SearchError;
use flownas_core::session::{DatasetError, SessionError};
use flownas_core::space::SpaceError;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("search failed: {0}")]
    Search(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Parse(_) => 4,
            CliError::Search(_) => 5,
            CliError::Training(_) => 6,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PcapError> for CliError {
    fn from(e: PcapError) -> Self {
        match e {
            PcapError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Parse(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Parse(e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::InvalidStrategy(_) | SessionError::ZeroLength => CliError::Config(e.to_string()),
            SessionError::EmptySession => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Parse(format!("architecture {e}"))
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::ShapeMismatch(_)
            | EngineError::Shape(_)
            | EngineError::InvalidConfig(_)
            | EngineError::EmptyDataset(_)
            | EngineError::LabelOutOfRange { .. } => CliError::Config(e.to_string()),
            EngineError::DivergedLoss { .. } | EngineError::NonFiniteActivation { .. } => {
                CliError::Training(e.to_string())
            }
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => CliError::Io(e.to_string()),
            CheckpointError::Engine(e) => e.into(),
            CheckpointError::Tensor { .. } | CheckpointError::Missing(_) => {
                CliError::Config(format!("weights do not fit the architecture: {e}"))
            }
            e => CliError::Parse(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Space(SpaceError::BudgetExhausted { .. }) => CliError::Search(e.to_string()),
            SearchError::Engine(e) => e.into(),
            SearchError::InvalidConfig(m) => CliError::Config(m),
            SearchError::CorruptCheckpoint(_) => CliError::Parse(e.to_string()),
            SearchError::Io(e) => CliError::Io(e.to_string()),
        }
    }
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Engine(e) => e.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

/// Hardware-constrained evolutionary architecture search for 1D-CNN traffic classifiers.
#[derive(Debug, Parser)]
#[command(name = "flownas", version)]
pub struct Cli {
    /// Worker threads for candidate training and batched inference
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn labelled pcap captures into a session dataset (SESS file)
    Preprocess(PreprocessArgs),
    /// Print the per-layer cost of an architecture and check the hardware budget
    Estimate(EstimateArgs),
    /// Run the evolutionary architecture search
    Search(SearchArgs),
    /// Train one architecture and save its weights
    Train(TrainArgs),
    /// Evaluate saved weights on a dataset
    Eval(EvalArgs),
    /// Simulate post-training quantization and compare with the real-valued model
    Quantize(QuantizeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML, or a manifest.json from an earlier run)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config file and FLOWNAS_SEED
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory; overrides output_dir from the config
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// SESS dataset file
    #[arg(long, value_name = "FILE", conflicts_with = "toy")]
    pub dataset: Option<PathBuf>,
    /// Use the bundled synthetic class-separable dataset
    #[arg(long)]
    pub toy: bool,
    /// Number of toy classes
    #[arg(long, value_name = "K", requires = "toy")]
    pub toy_classes: Option<u16>,
    /// Number of toy samples
    #[arg(long, value_name = "N", requires = "toy")]
    pub toy_samples: Option<usize>,
    /// Session length L (toy data only; files carry their own length)
    #[arg(long, value_name = "L")]
    pub length: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory of .pcap captures
    #[arg(long, value_name = "DIR")]
    pub pcap_dir: Option<PathBuf>,
    /// Label map: one `<file glob> <class>` rule per line
    #[arg(long, value_name = "FILE")]
    pub labels: Option<PathBuf>,
    /// Header treatment strategy (1-24)
    #[arg(long, value_name = "ID")]
    pub strategy: Option<u8>,
    /// Session length L in bytes
    #[arg(long, value_name = "L")]
    pub length: Option<usize>,
    /// Dataset file to write (default: <out>/dataset.sess)
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Write the synthetic toy dataset instead of reading captures
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    /// Architecture file (default: the reference architecture)
    #[arg(long, value_name = "FILE")]
    pub arch: Option<PathBuf>,
    /// Input length L (overrides the architecture file)
    #[arg(long, value_name = "L")]
    pub length: Option<usize>,
    /// Output classes of the reference architecture
    #[arg(long, value_name = "K", default_value_t = 11)]
    pub classes: usize,
    /// Run configuration supplying thresholds
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Parameter budget (exclusive)
    #[arg(long, value_name = "N")]
    pub max_params: Option<u64>,
    /// Peak tensor budget in elements (exclusive)
    #[arg(long, value_name = "N")]
    pub max_tensor: Option<u64>,
    /// FLOPs budget (exclusive)
    #[arg(long, value_name = "N")]
    pub max_flops: Option<u64>,
    /// Count 2 (trainable) instead of 4 (full) parameters per batch-norm channel
    #[arg(long)]
    pub bn_trainable_only: bool,
    /// Print CSV instead of the text table
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of generations
    #[arg(long, value_name = "N")]
    pub generations: Option<usize>,
    /// Children per generation
    #[arg(long, value_name = "N")]
    pub children: Option<usize>,
    /// Training epochs per candidate
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Continue from <out>/search_checkpoint.json
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many generations in total (the checkpoint allows resuming)
    #[arg(long, value_name = "N")]
    pub stop_after: Option<usize>,
    /// Initial parent architecture (default: the search-space seed architecture)
    #[arg(long, value_name = "FILE")]
    pub initial: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Architecture file (default: the reference architecture sized to the data)
    #[arg(long, value_name = "FILE")]
    pub arch: Option<PathBuf>,
    /// Maximum epochs
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Independent training runs; the best by validation accuracy is kept
    #[arg(long, value_name = "N")]
    pub multi_start: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Weights file written by `train`
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Architecture file (default: the .arch file next to the weights)
    #[arg(long, value_name = "FILE")]
    pub arch: Option<PathBuf>,
    /// SESS dataset to evaluate on
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Write per-class metrics as CSV
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Weights file written by `train`
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Architecture file (default: the .arch file next to the weights)
    #[arg(long, value_name = "FILE")]
    pub arch: Option<PathBuf>,
    /// SESS dataset used for activation calibration
    #[arg(long, value_name = "FILE")]
    pub calib: PathBuf,
    /// SESS dataset for the accuracy comparison (default: the calibration set)
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Bit width of weights and activations
    #[arg(long, value_name = "N")]
    pub bits: Option<u8>,
    /// Quantize weights per output channel instead of per tensor
    #[arg(long)]
    pub per_channel: bool,
    /// Report CSV path (default: <out>/quant_report.csv)
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

/// Runs a parsed command line on a pool of `cli.jobs` threads.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Search(a) => commands::search(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Quantize(a) => commands::quantize(a),
    })
}
