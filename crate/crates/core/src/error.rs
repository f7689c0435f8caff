use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("vocabulary error: unknown token id {0}")]
    Vocabulary(u32),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("no box found for category `{0}`")]
    NoBoxFound(String),
    #[error("external process failed: {0}")]
    External(String),
    #[error("unbound persona `{0}`")]
    Unbound(String),
    #[error("encoder mismatch: token built for `{token}`, active encoder is `{active}`")]
    EncoderMismatch { token: String, active: String },
    #[error("empty index")]
    EmptyIndex,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
