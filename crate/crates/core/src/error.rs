//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvsplatError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("gaussian {index} has non-finite parameters")]
    NonFiniteGaussian { index: usize },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("initialization failed: {0}")]
    InitFailure(String),

    #[error("dataset error at {path}: {msg}")]
    Dataset { path: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

impl EvsplatError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EvsplatError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, EvsplatError>;
