use thiserror::Error;

use crate::env::Action;

/// Errors raised by the routing workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid instance: {}", .0.join("; "))]
    InvalidInstance(Vec<String>),

    #[error("action {action:?} is masked in the current state")]
    MaskedAction { action: Action },

    #[error("infeasible episode: {remaining} customers left and no vehicle can serve any of them")]
    InfeasibleEpisode { remaining: usize, step: usize },

    #[error("episode is not terminal: {0} customers remain")]
    NotTerminal(usize),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
