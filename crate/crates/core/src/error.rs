use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite after jitter escalation up to {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported payload header (expected version {expected}, found {found})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("payload truncated: needed {needed} bytes, {available} available")]
    TruncatedPayload { needed: usize, available: usize },

    #[error("payload has {0} trailing bytes")]
    TrailingBytes(usize),

    #[error("unit {0} has an empty dataset")]
    EmptyDataset(u32),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("every unit failed in round {0}")]
    AllUnitsFailed(usize),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("inconsistent input dimension at line {line}: expected {expected}, got {actual}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidDataset(_)
            | Error::Parse { .. }
            | Error::InconsistentDimension { .. }
            | Error::EmptyDataset(_) => 2,
            Error::NotPositiveDefinite { .. }
            | Error::NonFiniteGradient
            | Error::AllUnitsFailed(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
