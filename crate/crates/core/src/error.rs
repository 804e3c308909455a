use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed transcript line {line} in {path}: {message}")]
    Transcript {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown session: {0}")]
    UnknownSession(String),

    #[error("unknown event uuid {uuid} in session {session}")]
    UnknownEvent { session: String, uuid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("rule parse error: {0}")]
    Rule(#[from] crate::permissions::RuleParseError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("model backend error: {0}")]
    Backend(#[from] crate::model::BackendError),

    #[error("agent error: {0}")]
    Agent(String),

    #[error("mcp error: {0}")]
    Mcp(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
