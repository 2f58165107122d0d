use std::path::PathBuf;

use fxmm_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("item id {id} out of range for {num_items} items at position {position}")]
    ItemIndex {
        id: usize,
        num_items: usize,
        position: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch} step {step}; first non-finite parameter: {parameter}")]
    NonFinite {
        epoch: usize,
        step: usize,
        parameter: String,
    },
}

impl Error {
    /// Short stable tag used in one-line CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::ItemIndex { .. } => "index",
            Error::Io { .. } => "io",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
