use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid patch: {0}")]
    InvalidPatch(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("patch {got}x{got2} smaller than window {window}", got = .dims.0, got2 = .dims.1, window = .window)]
    PatchSmallerThanWindow { dims: (usize, usize), window: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("manifest parse error at {path} line {line}: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },
}
