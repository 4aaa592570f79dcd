use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the ingestion, modelling, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum MmapError {
    #[error("dataset layout error: {0}")]
    DatasetLayout(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("patch window out of bounds: {0}")]
    Boundary(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MmapError>;

pub(crate) fn config_err(msg: impl Into<String>) -> MmapError {
    MmapError::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> MmapError {
    MmapError::Shape(msg.into())
}
