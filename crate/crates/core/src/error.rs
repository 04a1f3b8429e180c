use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("malformed mask file {path}: {reason}")]
    MalformedMaskFile { path: PathBuf, reason: String },

    #[error("segmentation service unreachable: {0}")]
    RemoteUnreachable(String),

    #[error("image too small: need at least {min}x{min}, got {height}x{width}")]
    ImageTooSmall { min: usize, height: usize, width: usize },

    #[error("image {height}x{width} is not divisible by {divisor}")]
    ShapeNotDivisible { height: usize, width: usize, divisor: usize },

    #[error("shape schedule violated: {0}")]
    ShapeSchedule(String),

    #[error("batch size {batch} is not divisible by group size {group}")]
    BatchNotDivisible { batch: usize, group: usize },

    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },

    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 data error, 2 configuration error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::BatchNotDivisible { .. } | Error::Checkpoint(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn unreadable(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnreadableFile {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
