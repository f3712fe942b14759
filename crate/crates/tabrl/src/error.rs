//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("row index {index} out of range for table with {n_rows} rows")]
    RowIndex { index: usize, n_rows: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("group of size {0} is too small for group statistics")]
    GroupTooSmall(usize),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("teacher error: {0}")]
    Teacher(String),

    #[error("http error: {0}")]
    Http(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
