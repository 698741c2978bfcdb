//! Experiment runner behind the `genmetric` command.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod rank;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use genmetric::dataset::LabelColumn;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "genmetric", version, about = "Generative local metrics for nearest neighbours, kernels and clustering")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Random seed (the base split seed for experiments).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "GENMETRIC_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Numeric CSV with one row per point.
    #[arg(long)]
    pub data: PathBuf,
    /// Label column: index, header name or `last`.
    #[arg(long, default_value = "last")]
    pub label_column: LabelColumn,
    /// The file has no header row.
    #[arg(long)]
    pub no_header: bool,
    /// Map every feature to [-1, 1] before anything else.
    #[arg(long)]
    pub scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMethod {
    Euclidean,
    MUni,
    MKde,
    MGmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricChoice {
    Euclidean,
    MUni,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a global metric from a labelled CSV and save it as JSON.
    FitMetric {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "m-uni")]
        method: FitMethod,
        /// Relative covariance ridge.
        #[arg(long, default_value_t = genmetric::generative::DEFAULT_LAMBDA_COV)]
        lambda_cov: f64,
    },
    /// k-NN predictions under a saved metric.
    Classify {
        /// Metric file written by `fit-metric`.
        #[arg(long)]
        metric: PathBuf,
        /// Labelled training CSV.
        #[arg(long)]
        train: PathBuf,
        /// CSV of points to classify (same layout as the training file);
        /// defaults to the training file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "last")]
        label_column: LabelColumn,
        #[arg(long)]
        no_header: bool,
    },
    /// Run a full experiment from a JSON configuration.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Override the number of repeats.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Compare a Euclidean kernel bank with banks built from regional metrics.
    Mkl {
        #[command(flatten)]
        data: DataArgs,
        /// Number of regional metrics.
        #[arg(long, default_value_t = 5)]
        regions: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Cluster a CSV with k-means under a learned metric.
    Cluster {
        #[command(flatten)]
        data: DataArgs,
        /// Number of clusters; defaults to the number of label values.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "m-uni")]
        metric: MetricChoice,
        #[arg(long, default_value_t = genmetric::generative::DEFAULT_LAMBDA_COV)]
        lambda_cov: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda_int: f64,
    },
    /// Isomap coordinates as CSV.
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 7)]
        neighbors: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, value_enum, default_value = "euclidean")]
        metric: MetricChoice,
    },
    /// Average ranks of methods over several `report.json` files.
    Rank {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

/// Configures logging and the thread pool, then dispatches.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    commands::dispatch(&cli.global, cli.command)
}
