use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported audio: {reason}")]
    UnsupportedAudio { path: PathBuf, reason: String },

    #[error("{path}: unreadable image: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("clip too short: need {required} samples, have {available}")]
    ClipTooShort { required: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Coarse grouping used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. }
            | Error::UnsupportedAudio { .. }
            | Error::Image { .. }
            | Error::Manifest { .. }
            | Error::Checkpoint { .. } => ErrorCategory::Io,
            Error::NonFinite(_) => ErrorCategory::Numeric,
            Error::ClipTooShort { .. }
            | Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::Dataset(_)
            | Error::Config(_) => ErrorCategory::Usage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Io,
    Numeric,
}
