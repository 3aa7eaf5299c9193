use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MbaError {
    #[error("invalid hyperparameter `{field}`: {reason}")]
    InvalidHyperparam { field: &'static str, reason: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{0}")]
    Checkpoint(String),

    #[error("index out of range: {kind} {index} >= {bound}")]
    IndexOutOfRange {
        kind: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("user {user} has interacted with every item; cannot sample a negative")]
    SaturatedUser { user: usize },

    #[error("non-finite value at epoch {epoch}, batch {batch}: {term}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        term: String,
    },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl MbaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MbaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MbaError>;
