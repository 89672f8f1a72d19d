use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length model has no mean for class {0}")]
    UninitializedClass(usize),

    #[error("no valid segmentation: {0}")]
    NoPath(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{}: {msg}", path.display())]
    Load { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("oracle refused: {0}")]
    OracleGuard(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
