use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("incomparable states: {0}")]
    IncomparableStates(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: validation error: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid example {id}: {message}")]
    InvalidExample { id: String, message: String },

    #[error("no path from start to goal")]
    NoPath,

    #[error("generation budget exhausted after {attempts} attempts")]
    GenerationExhausted { attempts: usize },

    #[error("missing demonstration for example {0}")]
    MissingDemonstration(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale trace: {0}")]
    StaleTrace(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown example id {0}")]
    UnknownExample(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
