use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing or violates its invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// The caller broke an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared during training or evaluation.
    #[error("non-finite value during {context}")]
    NonFinite { context: String },

    /// The expert could not produce enough violation-free demonstrations.
    #[error("expert generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
