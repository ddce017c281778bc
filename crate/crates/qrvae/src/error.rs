//! Crate error type.

use std::fmt;

/// Errors surfaced by dataset parsing, statistics, training and checkpoints.
///
/// Tensor-level contract violations (shape mismatches, non-scalar backward)
/// are programming errors and panic instead; see the `autodiff` module docs.
#[derive(Debug)]
pub enum Error {
    /// I/O failure, annotated with the path involved.
    Io { path: String, source: std::io::Error },
    /// Malformed input file (bad header, truncation, overflow).
    Parse { path: String, detail: String },
    /// An argument outside its documented domain.
    InvalidArgument(String),
    /// Checkpoint magic/version/manifest mismatch.
    Checkpoint(String),
    /// Training aborted because the loss became non-finite.
    NanLoss { epoch: usize, batch: usize },
    /// A required file or artifact is missing.
    Missing(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Parse { path, detail } => write!(f, "cannot parse {path}: {detail}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::NanLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::Missing(what) => write!(f, "missing: {what}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Wrap an I/O error with the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Parse failure for `path` with a human-readable detail.
    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
