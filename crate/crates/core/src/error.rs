use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no supervised tokens in loss computation")]
    NoSupervisedTokens,

    #[error("gradient check error: {0}")]
    GradCheck(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("failed to load image {path}: {message}")]
    ImageLoad { path: PathBuf, message: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("pack error: sample {index} has length {len}, pack length is {pack_len}")]
    Pack {
        index: usize,
        len: usize,
        pack_len: usize,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("checkpoint has bad magic bytes")]
    CheckpointMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),

    #[error("training diverged at step {step} (loss {loss}); last good checkpoint: {last_good}")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
