use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward already run on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("batch norm in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid patch plan: {0}")]
    Plan(String),

    #[error("graph is missing self-loops on node {0}")]
    MissingSelfLoop(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image too small for {op}: {h}x{w}")]
    ImageTooSmall { op: &'static str, h: usize, w: usize },

    #[error("payload of {payload_bits} bits cannot be bracketed by the cost map")]
    Unbracketable { payload_bits: f64 },

    #[error("invalid payload {0} bpp")]
    Payload(f64),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
