use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the counting pipeline.
///
/// Variants fall into two families: validation errors (bad parameters or
/// malformed values supplied by the caller) and data errors (files, parse
/// failures, numerical breakdown on the supplied data).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: value out of range: {message}")]
    OutOfRange {
        path: String,
        line: usize,
        message: String,
    },

    #[error("coordinate ({x}, {y}) outside {context}")]
    OutOfBounds { x: f64, y: f64, context: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("singular normal equations; use lambda > 0")]
    Singular,

    #[error("zero variance in paired differences")]
    ZeroVariance,

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("incomplete feature vector for block {0}")]
    IncompleteFeatures(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    /// True for errors caused by caller-supplied parameters rather than data.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::OutOfBounds { .. }
                | Error::DimensionMismatch { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
