use std::io;

use thiserror::Error;

/// Errors produced by tensor operations and decompositions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    /// An explicit unfolding (or other oracle path) would exceed the configured byte cap.
    #[error("resource cap exceeded: {what} needs {requested} bytes, cap is {cap} bytes")]
    ResourceCap {
        what: String,
        requested: usize,
        cap: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("job {task} failed: {source}")]
    Job {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn bounds(msg: impl Into<String>) -> Self {
        Error::OutOfBounds(msg.into())
    }

    /// Strips `Job` wrappers and returns the underlying error.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::Job { source, .. } => source.root_cause(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
