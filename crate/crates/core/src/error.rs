use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a precondition (non-finite coordinate, zero-area
    /// ground truth, out-of-range argument).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A structural or configuration mistake (shape mismatch, bad
    /// hyperparameter, unknown scheme or segment name).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called in the wrong order (e.g. backward before
    /// forward).
    #[error("state error: {0}")]
    State(String),

    /// A file did not match its expected binary or text format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A text file failed to parse at a specific line.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
