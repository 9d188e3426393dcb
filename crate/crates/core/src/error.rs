use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error category, used for the machine-readable CLI error line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Dimension,
    Unsupported,
    Numeric,
    Precondition,
    Io,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Config => "config",
            ErrorKind::Dimension => "dimension",
            ErrorKind::Unsupported => "unsupported",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Precondition => "precondition",
            ErrorKind::Io => "io",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("model {index}: {source}")]
    Model {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("iteration {index}: {source}")]
    Iteration {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Dimension { .. } => ErrorKind::Dimension,
            Error::Unsupported(_) => ErrorKind::Unsupported,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Precondition(_) => ErrorKind::Precondition,
            Error::Model { source, .. } | Error::Iteration { source, .. } => source.kind(),
            Error::Io(_) | Error::Json(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn in_model(self, index: usize) -> Error {
        Error::Model {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_iteration(self, index: usize) -> Error {
        Error::Iteration {
            index,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
