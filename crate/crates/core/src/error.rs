use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("PLY header: {0}")]
    PlyHeader(String),

    #[error("PLY body: {0}")]
    PlyBody(String),

    /// A point cloud invariant does not hold.
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("duplicate coordinate at point {index} (first seen at point {first})")]
    DuplicateCoordinate { index: usize, first: usize },

    #[error("k = {k} exceeds the number of indexed points ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("autodiff: {0}")]
    Tape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("fit: {0}")]
    Fit(String),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}
