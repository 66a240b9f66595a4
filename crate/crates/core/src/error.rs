use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated in {op}: {msg}")]
    Precondition { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("checkpoint {path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("checkpoint {path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint {path}: corrupt header at byte {offset}: {msg}")]
    CorruptCheckpoint {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("parameter names do not match: missing {missing:?}, unexpected {unexpected:?}")]
    ParameterMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("image {path}: parse error at byte {offset}: {msg}")]
    ImageParse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("image {path}: unsupported format: {msg}")]
    UnsupportedImage { path: PathBuf, msg: String },

    #[error("pixel value {value} outside [0, 1]")]
    OutOfRange { value: f64 },

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn pre(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            msg: msg.into(),
        }
    }
}
