use std::path::PathBuf;

use crate::ItemId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown item id {0}")]
    UnknownItem(ItemId),

    #[error("empty population: {0}")]
    EmptyPopulation(String),

    #[error("user {user} has interacted with every item; no negatives left")]
    ExhaustedNegatives { user: usize },

    #[error("user {user} has only {available} negative candidates, {requested} requested")]
    NotEnoughNegatives {
        user: usize,
        available: usize,
        requested: usize,
    },

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("not implemented: {0}")]
    Unimplemented(&'static str),

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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
