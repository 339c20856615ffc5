//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not agree.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A statistic is undefined for the given input (zero variance, zero mean, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A non-finite value appeared where finite input is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    /// A record in a line-delimited file could not be parsed or validated.
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    /// A word is not in the closed vocabulary.
    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),

    /// A binary or text artifact is malformed.
    #[error("bad format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A recorded content hash does not match the file on disk.
    #[error("hash mismatch for {path}: manifest {expected}, file {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    /// A brute-force cross-check disagreed with the main implementation.
    #[error("self-check failed: {0}")]
    SelfCheck(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line driver:
    /// 1 usage, 2 data/validation, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Shape { .. }
            | Error::Degenerate(_)
            | Error::NonFinite(_)
            | Error::NonFiniteLoss { .. }
            | Error::SelfCheck(_) => 3,
            Error::Record { .. }
            | Error::OutOfVocabulary(_)
            | Error::Format { .. }
            | Error::HashMismatch { .. }
            | Error::MissingInput(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
        }
    }
}
