use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading a checkpoint file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"RIBCAM1\"")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("content digest mismatch: stored {stored:016x}, computed {computed:016x}")]
    DigestMismatch { stored: u64, computed: u64 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint tensors do not match architecture: {0}")]
    ArchMismatch(String),
    #[error("malformed architecture block: {0}")]
    BadArch(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{0}")]
    Capability(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing inputs: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status for the command-line front end: 1 for bad
    /// inputs or configuration, 2 for anything touching the filesystem.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Shape(_) | Error::Capability(_) | Error::Config(_) => 1,
            Error::Checkpoint(_) | Error::Io { .. } | Error::Format { .. } | Error::MissingInputs(_) => 2,
        }
    }
}
