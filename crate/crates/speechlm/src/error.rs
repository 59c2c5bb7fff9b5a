//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A caller violated an operation precondition (bad shape, bad id, bad config).
    InvalidArgument(String),
    /// The object is in a state that does not admit the requested operation.
    InvalidState(String),
    /// A numeric failure: non-finite loss, divergence.
    Numeric(String),
    /// Generated text that does not match the expected output grammar.
    MalformedOutput(String),
    /// Checkpoint file with an unrecognized header.
    CorruptHeader(String),
    /// Checkpoint format version this build does not understand.
    VersionMismatch { found: u32, expected: u32 },
    /// Checkpoint payload inconsistent with its declared shapes.
    ShapeMismatch(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::InvalidState(m) => write!(f, "invalid state: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::MalformedOutput(m) => write!(f, "malformed output: {m}"),
            Error::CorruptHeader(m) => write!(f, "corrupt checkpoint header: {m}"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found} unsupported (expected {expected})")
            }
            Error::ShapeMismatch(m) => write!(f, "checkpoint shape mismatch: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for `Err(Error::InvalidArgument(...))` with format args.
macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::InvalidArgument(format!($($arg)*)))
    };
}
pub(crate) use invalid_arg;
