use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("non-numeric cell at ({row}, {col})")]
    NonNumericCell { row: usize, col: usize },

    #[error("label column {0} not found")]
    MissingLabelColumn(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix has a negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),

    #[error("metric matrix is singular")]
    SingularMetric,

    #[error("operation requires a binary problem, got {0} classes")]
    NotBinary(usize),

    #[error("degenerate pairwise distances")]
    DegeneratePairwiseDistances,

    #[error("embedding dimension {requested} exceeds the {available} positive eigenvalues")]
    EmbeddingDimension { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
