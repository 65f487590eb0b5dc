use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. The `exit_code` mapping is what the CLI reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("unsupported channel layout in {path}: {layout}")]
    UnsupportedLayout { path: PathBuf, layout: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate output size: {0}")]
    DegenerateSize(String),

    #[error("image {height}x{width} is smaller than the {patch}x{patch} patch")]
    PatchTooLarge {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("obb file {path} contains invalid pixel value {value} (expected 0, 1 or 2)")]
    InvalidObbValue { path: PathBuf, value: u8 },

    #[error("unknown class name {0:?} in background class set")]
    UnknownClassName(String),

    #[error("weight archive {path}: {reason}")]
    WeightArchive { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("non-finite loss at step {step} (lr {lr}): {detail}")]
    NonFiniteLoss { step: u64, lr: f64, detail: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    /// CLI exit code: 1 usage error, 2 data error, 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::DegenerateSize(_) => 1,
            Error::Io { .. }
            | Error::ImageDecode { .. }
            | Error::UnsupportedLayout { .. }
            | Error::InvalidObbValue { .. }
            | Error::UnknownClassName(_)
            | Error::WeightArchive { .. }
            | Error::Checkpoint { .. }
            | Error::Manifest { .. }
            | Error::DimensionMismatch(_)
            | Error::PatchTooLarge { .. } => 2,
            Error::NonFiniteLoss { .. } | Error::Other(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
