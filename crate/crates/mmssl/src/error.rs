use std::io;
use std::path::PathBuf;

/// Errors from file formats, configuration and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mmssl_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: unsupported checkpoint version or magic ({found})")]
    Version { path: PathBuf, found: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit status for an outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Ok = 0,
    Validation = 1,
    Numeric = 2,
}

impl Error {
    pub fn exit_kind(&self) -> ExitKind {
        match self {
            Error::Core(mmssl_core::Error::NonFinite { .. }) => ExitKind::Numeric,
            _ => ExitKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
