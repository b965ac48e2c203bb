use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain: {0}")]
    Domain(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("index: {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    /// Malformed binary or text input; `offset` is the byte position where parsing failed.
    #[error("parse: byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("scene: line {line}: {msg}")]
    Scene { line: usize, msg: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no-data: {0}")]
    NoData(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable category, used by the CLI's stderr line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Shape(_) => "shape",
            Error::Index { .. } => "index",
            Error::Parse { .. } => "parse",
            Error::Scene { .. } => "scene",
            Error::Io { .. } => "io",
            Error::NoData(_) => "no-data",
        }
    }
}
