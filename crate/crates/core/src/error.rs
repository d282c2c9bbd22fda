use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} out of range [{min}, {max}]")]
    Bounds {
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid kernel specification: {0}")]
    InvalidSpec(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(
        "{failed} of {total} replications failed numerically (limit 1%); first failure: {first}"
    )]
    FailureThreshold {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn bounds(what: &'static str, value: usize, min: usize, max: usize) -> Self {
        Error::Bounds {
            what,
            value,
            min,
            max,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_level(what: &'static str, value: usize, max: usize) -> Result<()> {
    if value == 0 || value > max {
        Err(Error::bounds(what, value, 1, max))
    } else {
        Ok(())
    }
}
