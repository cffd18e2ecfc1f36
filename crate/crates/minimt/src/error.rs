//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not fit the operation; the message names both shapes.
    Dimension(String),
    /// Bad user-supplied data (corpora, vocabularies, ids, plans).
    Input(String),
    /// Invalid model or run configuration; the message names the field.
    Config(String),
    /// An object was used outside its lifecycle (consumed graph, stale cache).
    State(String),
    /// An internal contract was violated (non-scalar loss, mismatched grads).
    Contract(String),
    /// Parallel files disagree in length.
    Alignment { left: usize, right: usize },
    /// A file is not valid UTF-8.
    Encoding { path: PathBuf, line: usize },
    /// A forward pass or loss produced NaN/Inf.
    Numeric(String),
    /// Filesystem failure, with the path involved.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Self::Input(msg) => write!(f, "input error: {msg}"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::State(msg) => write!(f, "state error: {msg}"),
            Self::Contract(msg) => write!(f, "contract error: {msg}"),
            Self::Alignment { left, right } => {
                write!(f, "alignment error: files have {left} and {right} lines")
            }
            Self::Encoding { path, line } => {
                write!(f, "encoding error: {} is not UTF-8 at line {line}", path.display())
            }
            Self::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Self::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
