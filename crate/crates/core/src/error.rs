use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss became NaN at epoch {epoch}, batch {batch} (lr {lr})")]
    NanLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("unknown segment `{0}`")]
    UnknownSegment(String),

    #[error("combination sweep over {segments} segments needs {required} runs; at most 8 segments are allowed")]
    SweepBudget { segments: usize, required: usize },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected}); re-export it with a matching release")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint {0} is corrupt: checksum mismatch")]
    Corrupt(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
