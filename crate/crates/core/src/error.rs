use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("line {line}: synonym set of size {size} exceeds cap {cap}")]
    SynonymCap {
        line: usize,
        size: usize,
        cap: usize,
    },

    #[error("sequence of length {len} exceeds context window {max}")]
    Context { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("position {position} is not eligible for concept supervision")]
    NotContent { position: usize },

    #[error(
        "provider transport failed after {attempts} attempt(s) (retryable: {retryable}): {message}"
    )]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },

    #[error("unparseable provider reply: {0}")]
    ProviderReply(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("records are not aligned: {0}")]
    Pairing(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("cannot normalize zero-norm vector: {0}")]
    Normalization(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
