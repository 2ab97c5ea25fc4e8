use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dataset layout error at {path}: {reason}")]
    Layout { path: PathBuf, reason: String },

    #[error("empty dataset: no media files under {0}")]
    EmptyDataset(PathBuf),

    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code: 2 config/validation, 3 training, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Load(_)
            | Error::Capability(_)
            | Error::Lookup(_)
            | Error::Dependency(_) => 2,
            Error::Training { .. } => 3,
            Error::Layout { .. }
            | Error::EmptyDataset(_)
            | Error::Ingest { .. }
            | Error::Parse { .. }
            | Error::Io { .. } => 4,
        }
    }
}
