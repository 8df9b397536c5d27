use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes of the checkpoint container, kept distinct so callers can
/// tell corruption apart from version skew.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}, expected \"SOTC\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed metadata: {0}")]
    Metadata(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("missing metadata key `{0}`")]
    MissingKey(String),
    #[error("artifact kind `{found}` where `{expected}` was expected")]
    WrongKind { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("SVD did not converge after {sweeps} sweeps (residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("group {group} violates quotas: k={k} + kappa={kappa} > group size {size}")]
    QuotaViolation {
        group: usize,
        k: usize,
        kappa: usize,
        size: usize,
    },
    #[error("fingerprint mismatch: expected {expected:#010x}, found {found:#010x}")]
    FingerprintMismatch { expected: u32, found: u32 },
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
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
