use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload of {path} has {actual} bytes, header implies {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("georeference mismatch: {0}")]
    GeoRefMismatch(String),

    #[error("category code {code} at cell {cell} outside vocabulary of {size} entries")]
    CodeOutOfRange { code: i32, cell: usize, size: usize },

    #[error("duplicate channel name {0:?}")]
    DuplicateChannel(String),

    #[error("pixel ({row}, {col}) is out of bounds or invalid")]
    InvalidPixel { row: usize, col: usize },

    #[error("no channel has |weight| >= {threshold}; lower the threshold")]
    EmptySelection { threshold: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no valid cells to average over")]
    EmptyMask,

    #[error("ROC needs at least one positive and one negative (got {positives} / {negatives})")]
    SingleClass { positives: usize, negatives: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
