//! Crate-wide error type. Recoverable conditions (bad config, shape
//! mismatches at public boundaries, format problems) are reported through
//! [`Error`]; internal invariant violations panic.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch at {path}: expected {expected}, got {got}")]
    Shape {
        path: String,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    Usage(String),

    #[error("replay buffer not ready: {0}")]
    NotReady(String),

    #[error("format version mismatch: file has version {found}, this build expects {expected}")]
    Version { found: u32, expected: u32 },

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn shape(path: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            path: path.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
