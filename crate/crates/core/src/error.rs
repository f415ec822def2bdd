use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Unsupported or corrupt file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported sample rate {observed} Hz (expected {expected} Hz)")]
    SampleRate { observed: u32, expected: u32 },

    #[error("row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("non-finite value in {layer}")]
    Numeric { layer: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("configuration mismatch: {0}")]
    Mismatch(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// A review decision was already recorded for the candidate.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("version mismatch: file has version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
