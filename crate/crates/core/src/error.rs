use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QfaError>;

#[derive(Debug, Error)]
pub enum QfaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A resource constraint no configuration can meet.
    #[error("infeasible constraint: {0}")]
    Infeasible(String),

    /// Rejection sampling ran out of tries; the constraint is infeasible or too tight.
    #[error("sampling budget exhausted after {tries} tries (constraint {constraint})")]
    Budget { tries: usize, constraint: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl QfaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        QfaError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        QfaError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        QfaError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QfaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        QfaError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        QfaError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
