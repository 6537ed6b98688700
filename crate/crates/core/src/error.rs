//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameter value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Shape/range violation of an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerical degeneracy or a non-finite value mid-computation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or unreadable input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error{}: {source}", path_note(.path))]
    Io {
        source: std::io::Error,
        path: Option<std::path::PathBuf>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn path_note(path: &Option<std::path::PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}

impl From<std::io::Error> for Error {
    fn from(source: std::io::Error) -> Self {
        Error::Io { source, path: None }
    }
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(source: std::io::Error, path: impl Into<std::path::PathBuf>) -> Self {
        Error::Io {
            source,
            path: Some(path.into()),
        }
    }
}
