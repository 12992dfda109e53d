use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error on {path}: {source}")]
    IoPath {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no data: {0}")]
    NoData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of bounds for embedding table with {rows} rows")]
    IdOutOfBounds { id: u32, rows: usize },

    #[error("batch normalization needs at least 2 examples in training, got {0}")]
    BatchTooSmall(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("shard count {shards} does not divide embedding dimension {dim}")]
    UnevenShards { shards: usize, dim: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("duplicate product id {0:?}")]
    DuplicateProduct(String),

    #[error("too many malformed lines: {bad} of {total}")]
    TooManyMalformed { bad: usize, total: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::IoPath { path, source }
    }
}
