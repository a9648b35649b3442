use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameter vector has length {got}, architecture expects {expected}")]
    ParamLength { expected: usize, got: usize },

    #[error("invalid network parameters: {0}")]
    InvalidParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coefficient validation failed: {0}")]
    CoefficientBounds(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("exact data unavailable: {0}")]
    MissingExactData(String),

    #[error("index {index} outside [{lo}, {hi}]")]
    IndexOutOfRange { index: i64, lo: i64, hi: i64 },

    #[error("point {0:?} lies outside the unit box")]
    OutOfDomain(Vec<f64>),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("clip scale {scale} does not cover spline sup-norm bound {bound}")]
    ClipTooSmall { scale: f64, bound: f64 },

    #[error("gadget validation failed: {0}")]
    GadgetValidation(String),

    #[error("no retained samples (iterations {iterations}, burn-in {burn_in}, thin {thin})")]
    NoSamples {
        iterations: usize,
        burn_in: usize,
        thin: usize,
    },

    #[error("infeasible code request: {0}")]
    InfeasibleCode(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("chain state cache inconsistent: {0}")]
    InconsistentCache(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("decode: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
