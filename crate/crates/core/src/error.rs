use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("sample size {requested} out of range 1..={available}")]
    SampleSizeOutOfRange { requested: usize, available: usize },

    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("model schema error in layer {layer}: {message}")]
    ModelSchema { layer: usize, message: String },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("graph {index} has no target")]
    MissingTarget { index: usize },

    #[error("unbalanced masses: source sums to {source_mass}, target sums to {target_mass}")]
    UnbalancedMasses { source_mass: f64, target_mass: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("FGW cost requested on a layer without graph structure (layer {layer})")]
    FgwWithoutStructure { layer: usize },

    #[error("brute-force oracle supports n <= {max}, got {actual}")]
    OracleTooLarge { max: usize, actual: usize },

    #[error("model has no batch normalization layers")]
    NoBatchNorm,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
