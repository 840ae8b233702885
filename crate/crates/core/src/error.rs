use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the explainer library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid explanation triple: {0}")]
    InvalidTriple(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("game has {players} players, above the enumeration cap of {cap}; use Monte Carlo sampling instead")]
    TooManyPlayers { players: usize, cap: usize },

    #[error("no active arms: explanation requirements are already satisfied")]
    NoActiveArms,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a serde_json failure, keeping its line/column context.
    pub(crate) fn parse(path: impl std::fmt::Display, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.to_string(),
            message: err.to_string(),
        }
    }
}
