use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the epiflow core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("action norm {norm} exceeds the unit bound")]
    ActionOutOfBounds { norm: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("value iteration did not converge after {sweeps} sweeps (last change {last_change:e})")]
    NoConvergence { sweeps: usize, last_change: f64 },

    #[error("dataset would hold {requested} transitions, above the cap of {cap}")]
    MemoryCap { requested: usize, cap: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    VersionMismatch { found: String, expected: String },

    #[error("checksum mismatch: header says {expected}, payload hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
