use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("deadlock: {0}")]
    Deadlock(String),

    #[error("group error: {0}")]
    Group(String),

    #[error("rank {rank} panicked: {message}")]
    RankPanic { rank: usize, message: String },

    #[error("head divisibility: {heads} heads cannot be split over {degree} ranks")]
    HeadDivisibility { heads: usize, degree: usize },

    #[error("sequence divisibility: {seq_len} tokens cannot be split over {degree} ranks")]
    SeqDivisibility { seq_len: usize, degree: usize },

    #[error("divisibility: {0}")]
    Divisibility(String),

    #[error("range-tiling invariant violated: {0}")]
    ShardRange(String),

    #[error("stale state: {0}")]
    StaleState(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("invalid config ({invariant}): {detail}")]
    Config { invariant: &'static str, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(invariant: &'static str, detail: impl Into<String>) -> Self {
        Error::Config {
            invariant,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
