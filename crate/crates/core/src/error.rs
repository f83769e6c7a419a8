use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures decoding or validating a tensor container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes (expected SKOPTEN1)")]
    BadMagic,

    #[error("file truncated while reading {what}")]
    Truncated { what: String },

    #[error("payload checksum mismatch: stored {stored:#x}, computed {computed:#x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),

    #[error("tensor name is not valid UTF-8")]
    BadName,

    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),

    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
}
