use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({label}): {detail}")]
    Shape {
        node: usize,
        label: String,
        detail: String,
    },

    #[error("node {node} ({label}) is not differentiable here: {detail}")]
    NonDifferentiable {
        node: usize,
        label: String,
        detail: String,
    },

    #[error("out of range: {0}")]
    Range(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn range_err(msg: impl Into<String>) -> Error {
    Error::Range(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
