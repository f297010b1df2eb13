use std::path::PathBuf;

use crate::corpus::SnippetRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("alignment error: {logs} dialogue logs but {labels} labels")]
    Alignment { logs: usize, labels: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("cannot generate from an empty selection")]
    EmptySelection,

    #[error("no sentiment annotation for snippet {0}")]
    MissingAnnotation(SnippetRef),

    /// The remote service could not be reached or answered with a non-2xx
    /// status. Retrying may help.
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    /// The remote service answered, but the reply does not follow the
    /// protocol. Retrying will not help.
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },

    #[error("not found: {0}")]
    NotFound(String),

    /// The resource is busy with another request.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by an external service rather than local data.
    pub fn is_external(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Protocol { .. })
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
