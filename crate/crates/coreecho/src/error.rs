//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardAlreadyRun,

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Checkpoint decode failures, kept distinct so callers can tell a stale file
/// from a corrupt one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected CRCK, found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("truncated checkpoint file: {0}")]
    Truncated(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;
