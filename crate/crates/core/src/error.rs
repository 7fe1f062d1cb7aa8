use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label {value} at pixel {pixel}: expected a class below {classes} or 255")]
    InvalidLabel {
        value: u8,
        pixel: usize,
        classes: usize,
    },

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("dataset integrity: {0}")]
    DatasetIntegrity(String),

    #[error("cannot decode {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the library itself rather than of its inputs.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Invariant(_))
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
