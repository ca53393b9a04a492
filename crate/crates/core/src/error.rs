use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its invariant.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Dataset ingestion failed; `context` names the row, record or byte offset.
    #[error("{path}: {context}")]
    Load { path: PathBuf, context: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    /// Every unnormalized particle weight collapsed to zero.
    #[error("degenerate weight update: all unnormalized weights are zero")]
    DegenerateUpdate,

    /// Training produced non-finite losses or parameters.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, context: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            context: context.into(),
        }
    }
}
