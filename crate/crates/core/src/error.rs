use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The geometry lacks a contiguous difference co-array.
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    /// A numerical routine could not produce a result (no convergence,
    /// not enough admissible polynomial roots, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Dataset / checkpoint incompatibility (array size, source budget).
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
