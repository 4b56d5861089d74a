use std::io;

use thiserror::Error;

/// Failures while decoding one of the binary containers (FVOL, FCKPT1).
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error(
        "dimension/payload mismatch: header declares {declared} values, payload holds {actual}"
    )]
    DimMismatch { declared: usize, actual: usize },
    #[error("invalid header field {field}: {detail}")]
    InvalidField { field: &'static str, detail: String },
    #[error("trailing bytes after payload: {0}")]
    Trailing(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("config error: {0}")]
    Config(String),
    #[error("at timestep {t}: {source}")]
    Timestep {
        t: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
