use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid settings: empty splits, impossible generator palettes, bad lengths.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape mismatch, unknown id, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// A pipeline stage or checkpoint that must exist first is missing.
    #[error("missing dependency: {0}")]
    Dependency(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
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
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
