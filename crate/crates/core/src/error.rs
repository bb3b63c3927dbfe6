use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary too small: {size} ids (need at least {min})")]
    VocabularyTooSmall { size: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("context exceeded: sequence of {len} > budget {budget}")]
    ContextExceeded { len: usize, budget: usize },

    #[error("image placeholder mismatch: {0}")]
    Placeholder(String),

    #[error("non-finite {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },

    #[error("rehearsal buffer rejects task 1 samples")]
    RehearsalTaskOne,

    #[error("adapter mismatch: {0}")]
    AdapterMismatch(String),

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("pretraining floor unreachable: {0}")]
    FloorUnreachable(String),

    #[error("missing baseline for {0}")]
    MissingBaseline(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::FloorUnreachable(_) => ErrorKind::Numeric,
            Error::Io { .. } | Error::Format { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Format { what: what.into(), detail: detail.to_string() }
    }
}
