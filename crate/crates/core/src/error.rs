use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MucError>;

#[derive(Debug, Error)]
pub enum MucError {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid asset construction: {0}")]
    InvalidAsset(String),

    /// Points at or behind the camera plane (z_c <= 1e-6 m).
    #[error("points behind camera at indices {indices:?}")]
    BehindCamera { indices: Vec<usize> },

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("malformed record: {0}")]
    Format(String),

    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("procrustes alignment is degenerate: {0}")]
    DegenerateAlignment(String),
    #[error("non-finite loss at batch {batch}: {detail}")]
    NumericFailure { batch: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint does not match network spec: {0}")]
    CheckpointMismatch(String),
    #[error("dataset asset hash {found} does not match asset {expected}")]
    AssetHashMismatch { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MucError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MucError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MucError::Config(_) | MucError::InvalidArgument(_) => 2,
            MucError::NonFinite(_)
            | MucError::Autodiff(_)
            | MucError::NumericFailure { .. }
            | MucError::DegenerateAlignment(_)
            | MucError::BehindCamera { .. } => 3,
            MucError::Io { .. }
            | MucError::BadMagic { .. }
            | MucError::VersionMismatch { .. }
            | MucError::Truncated(_)
            | MucError::Format(_)
            | MucError::AssetHashMismatch { .. }
            | MucError::CheckpointMismatch(_)
            | MucError::InvariantViolation(_) => 4,
            MucError::DimensionMismatch { .. } | MucError::InvalidAsset(_) => 2,
        }
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(MucError::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}
