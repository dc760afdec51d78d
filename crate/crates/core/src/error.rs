use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` is mapped but not present in the header")]
    MissingColumn(String),

    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid sampling design: {0}")]
    InvalidDesign(String),

    #[error("design matrix is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("covariate dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class label {label} outside 0..{n_classes}")]
    UnknownClass { label: f64, n_classes: usize },

    #[error("score list is empty")]
    EmptyScores,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    IncompatibleDesign(String),

    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),

    #[error("unknown cluster `{0}`")]
    UnknownCluster(String),

    #[error("experiment has an empty method matrix")]
    EmptyMethodMatrix,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
