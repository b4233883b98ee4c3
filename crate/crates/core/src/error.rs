use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("training diverged at iteration {iter}: {reason}")]
    Diverged { iter: u64, reason: String },

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing checkpoint in {0}")]
    MissingCheckpoint(PathBuf),

    #[error("run directory {0} is locked by another command")]
    Locked(PathBuf),

    #[error("unknown sweep axis `{0}`")]
    UnknownAxis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: &str) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }
}
