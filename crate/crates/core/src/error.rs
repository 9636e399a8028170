use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A logit, output or gradient entry overflowed. `context` names the
    /// quantity and, when known, the training iteration.
    #[error("numerical overflow: non-finite {context}")]
    NonFinite { context: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    /// Attach an iteration index to a numerical failure.
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            Error::NonFinite { context } => Error::Diverged {
                iteration,
                reason: format!("non-finite {context}"),
            },
            other => other,
        }
    }
}

/// Failures reading or writing the binary checkpoint format.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("bad magic bytes {found:?}, expected \"GSAT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("checkpoint has {extra} trailing bytes after the weight block")]
    TrailingBytes { extra: usize },

    #[error("invalid checkpoint header: {0}")]
    InvalidHeader(String),

    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint sidecar error: {0}")]
    Sidecar(#[from] serde_json::Error),
}
