use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the pipeline.
///
/// The variants map onto the CLI exit-code contract: `Validation`, `Parse`,
/// `Format`, `Bounds` and `Io` are usage/input problems, `External` is a
/// failing remote service, and `Invariant` is an internal contract violation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("index {index} out of range 1..={len}")]
    Bounds { index: usize, len: usize },

    #[error("external service error: {0}")]
    External(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
