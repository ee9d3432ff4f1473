use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: video `{video_id}` at byte offset {offset}: {message}")]
    Dataset {
        path: PathBuf,
        video_id: String,
        offset: u64,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at stage {stage}, epoch {epoch}: {message}")]
    Diverged {
        stage: u8,
        epoch: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short, stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Dataset { .. } => "dataset",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

pub(crate) fn ensure_dim(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            actual,
        })
    }
}
