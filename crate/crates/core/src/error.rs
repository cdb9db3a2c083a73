use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AclError> = std::result::Result<T, E>;

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum AclError {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("self-affinity undefined")]
    SelfAffinity,

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("{}: bad magic {found:?}, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{}: unsupported format version {found}, expected {expected}", path.display())]
    VersionMismatch { path: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated payload, expected {expected} bytes, found {actual}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: malformed file: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    IoAt { path: PathBuf, source: std::io::Error },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AclError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            AclError::NonFinite(_) => ErrorKind::Numerical,
            AclError::Io(_) | AclError::IoAt { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AclError::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AclError::Shape(msg.into())
    }

    pub(crate) fn io_at(path: &std::path::Path, source: std::io::Error) -> Self {
        AclError::IoAt {
            path: path.to_path_buf(),
            source,
        }
    }
}
