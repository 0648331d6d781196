//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, NcError>;

/// Errors emitted by tensor, layer, network, training, and I/O code.
#[derive(Debug, Clone, PartialEq)]
pub enum NcError {
    /// A shape or dimension contract was violated.
    Shape(String),
    /// An argument or configuration value is out of its documented range.
    Invalid(String),
    /// The confidence-weighted Grammian is singular: the window holds too
    /// little confident support to solve for the signal coefficients.
    InsufficientSupport(String),
    /// The full-confidence Grammian is degenerate (det G0 <= 0).
    DegenerateBasis(String),
    /// A file or stream operation failed.
    Io { path: PathBuf, message: String },
    /// File contents are malformed or of an unsupported format.
    Format(String),
    /// A non-finite value appeared where finite arithmetic is required.
    NonFinite(String),
}

impl fmt::Display for NcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NcError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            NcError::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            NcError::InsufficientSupport(msg) => {
                write!(f, "insufficient confidence support: {msg}")
            }
            NcError::DegenerateBasis(msg) => write!(f, "degenerate basis: {msg}"),
            NcError::Io { path, message } => {
                write!(f, "i/o error on {}: {message}", path.display())
            }
            NcError::Format(msg) => write!(f, "format error: {msg}"),
            NcError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl std::error::Error for NcError {}

impl NcError {
    pub fn io(path: impl Into<PathBuf>, err: impl fmt::Display) -> Self {
        NcError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
