use std::path::PathBuf;

/// Errors raised anywhere in the simulation, estimation and training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attention row {row} has an empty neighbourhood")]
    DegenerateRow { row: usize },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("truncated blob {path}: {actual} bytes is not a whole number of {record}-byte records")]
    Truncated {
        path: PathBuf,
        actual: u64,
        record: u64,
    },

    #[error("manifest/blob inconsistency: {0}")]
    Inconsistent(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
