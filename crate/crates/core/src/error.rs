use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("stage count {0} out of range (expected 1..=30)")]
    StageCount(u32),
    #[error("block length {0} is not a power of two >= 2")]
    BlockLength(usize),
    #[error("invalid code dimensions N={n}, K={k}")]
    Dimensions { n: usize, k: usize },
    #[error("design erasure probability {0} must lie in (0, 1)")]
    DesignErasure(f64),
    #[error("invalid information set: {0}")]
    InfoSet(String),
    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("code definition: {0}")]
    CodeFile(String),
    #[error("weight checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("config key `{0}` is missing")]
    MissingKey(String),
    #[error("config key `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("supervised loss requires codeword labels")]
    MissingLabels,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("report: {0}")]
    Report(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
