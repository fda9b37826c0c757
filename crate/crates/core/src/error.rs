use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimensions {dims:?} are not divisible by token size {token_size}")]
    IndivisibleDims { dims: [usize; 3], token_size: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("mask has no foreground voxel")]
    EmptyMask,

    #[error("click {position:?} outside volume of shape {shape:?}")]
    ClickOutOfBounds { position: [usize; 3], shape: [usize; 3] },

    #[error("interaction index {0} already present in memory bank")]
    DuplicateInteraction(u64),

    #[error("a refinement after the first interaction needs at least one click")]
    NoClicks,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("archive error: {0}")]
    Archive(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("parameters are untrained")]
    Untrained,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("gradient check failed for {0:?}")]
    GradCheck(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
