//! Command-line pipeline driver: each subcommand runs one stage of the
//! address-graph pretraining pipeline against a shared output directory and
//! prints a single JSON status line on success.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage, 3 data or format
//! error, 4 numerical error.

pub mod commands;
pub mod config;
pub mod verify;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "addrgraph", version, about = "Address-graph pretraining pipeline")]
pub struct Cli {
    /// TOML pipeline configuration; defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override the pipeline seed (also reseeds the world generator).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Root directory for all pipeline artifacts.
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic delivery world.
    GenWorld,
    /// Build the heterogeneous address graph from the world.
    BuildGraph,
    /// Sample training subgraphs from the graph.
    Sample {
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Compute structural features for every sample.
    Featurize,
    /// Assemble pretraining shards (vocabulary, masking, labels, paths).
    MakePretrain,
    /// Run the pretraining loop and write a checkpoint.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune a fresh deep-grid head for downstream geocoding.
    FinetuneGeo {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate geocoding accuracy at the configured distance thresholds.
    EvalGeo,
    /// Evaluate masked-region prediction through the hierarchy head.
    EvalAep,
    /// Evaluate entity tokenization in units of entities.
    EvalAet,
    /// Write CLS embeddings for every address.
    Embed,
    /// Cluster-quality metrics over stored embeddings.
    ClusterMetrics,
    /// Run the self-contained property suite; nonzero exit on any failure.
    Verify,
}

/// Stage errors, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 3: missing or malformed data, bad configuration.
    Data(String),
    /// Exit 4: non-finite numbers in training or evaluation.
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl From<addrgraph::model::ModelError> for CliError {
    fn from(e: addrgraph::model::ModelError) -> Self {
        match e {
            addrgraph::model::ModelError::NumericalError { .. } => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<addrgraph::evaluate::EvalError> for CliError {
    fn from(e: addrgraph::evaluate::EvalError) -> Self {
        match e {
            addrgraph::evaluate::EvalError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error_from!(
    addrgraph::synth::ConfigError,
    addrgraph::address::AddressError,
    addrgraph::graph::GraphError,
    addrgraph::sampler::SamplerError,
    addrgraph::features::FeatureError,
    addrgraph::pretask::PretaskError,
    addrgraph::io::IoError
);

/// Parse and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with code 0, usage errors
            // on stderr with code 2
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    let config = match config::PipelineConfig::resolve(cli.config.as_deref(), cli.seed) {
        Ok(config) => config,
        Err(message) => {
            eprintln!("error: {message}");
            return 3;
        }
    };
    let result = match &cli.command {
        Command::Verify => return verify::run_verify(&cli.out_dir, &config),
        other => commands::dispatch(other, &cli.out_dir, &config),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Data(message)) => {
            eprintln!("error: {message}");
            3
        }
        Err(CliError::Numerical(message)) => {
            eprintln!("error: {message}");
            4
        }
    }
}
