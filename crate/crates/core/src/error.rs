use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("{path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("{path}:{row}: {msg}")]
    Parse {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("label quality: {0}")]
    LabelQuality(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}, sample {sample}: {value}")]
    NanLoss {
        epoch: usize,
        batch: usize,
        sample: String,
        value: f64,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
