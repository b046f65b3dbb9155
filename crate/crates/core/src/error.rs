use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing a tensor container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorFileError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated tensor file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("payload length {payload} does not match dims {dims:?} ({expected} bytes expected)")]
    PayloadMismatch {
        dims: Vec<usize>,
        payload: u64,
        expected: u64,
    },
    #[error("{0} trailing bytes after metadata block")]
    TrailingBytes(usize),
    #[error("malformed metadata: {0}")]
    Metadata(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at step {step}: term `{term}` = {value}")]
    NonFinite {
        step: usize,
        term: &'static str,
        value: f64,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: TensorFileError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_same_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            context,
            expected: vec![a],
            got: vec![b],
        });
    }
    Ok(())
}
