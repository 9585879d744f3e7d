use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
