use std::path::PathBuf;

/// Errors raised by the retrieval engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A remote service could not be reached or answered with a failure.
    #[error("transport error: {message} (retries exhausted: {retries_exhausted})")]
    Transport {
        message: String,
        retries_exhausted: bool,
    },

    /// A remote service answered, but its payload broke the wire contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// A training dataset cannot produce usable triples.
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Another exclusive operation, such as training, is already running.
    #[error("conflict: {0}")]
    Conflict(String),

    #[error("training error at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Data(_) => "data",
            Error::Transport { .. } => "transport",
            Error::Contract(_) => "contract",
            Error::Dataset(_) => "dataset",
            Error::NotFound(_) => "not_found",
            Error::Conflict(_) => "conflict",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
