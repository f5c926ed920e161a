use std::path::PathBuf;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    BadVersion {
        path: PathBuf,
        found: u16,
        expected: u16,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("invariant violated in {path}: {detail}")]
    InvariantViolation { path: PathBuf, detail: String },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("empty database")]
    EmptyDatabase,

    #[error("pose estimation failed: {0}")]
    PoseEstimation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
