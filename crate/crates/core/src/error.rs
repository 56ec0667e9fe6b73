use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("failed to load slide `{slide}`: {reason}")]
    Load { slide: String, reason: String },

    #[error("malformed feature store at {path}: {reason}")]
    Store { path: PathBuf, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("table {path}: {reason}")]
    Table { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, slide `{slide}`")]
    NonFinite { epoch: usize, slide: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
