use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("data error at {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at iteration {iter}: {message}")]
    Divergence { iter: u64, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn data_err(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.into(),
        message: msg.into(),
    }
}
