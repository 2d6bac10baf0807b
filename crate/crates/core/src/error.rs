use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used to map errors onto CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("entry ({row}, {col}) is {value}, expected +1 or -1")]
    NotSign { row: usize, col: usize, value: f64 },
    #[error("degenerate calibration statistics: {0}")]
    DegenerateCalibration(String),
    #[error("Hessian is not positive definite; increase damping")]
    SingularHessian,
    #[error("empty candidate set for {0}")]
    EmptyCandidates(&'static str),
    #[error("empty scope for group split")]
    EmptyScope,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("unsupported tensor rank {0}")]
    BadRank(u8),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("missing calibration file for layer '{layer}' at {path}")]
    MissingCalibration { layer: String, path: PathBuf },
    #[error("{0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) | Error::Config { .. } => ErrorClass::Usage,
            Error::DegenerateCalibration(_) | Error::SingularHessian => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
