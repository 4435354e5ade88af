use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, HomlabError>;

#[derive(Debug, Error)]
pub enum HomlabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite functional value under perturbation `{0}`")]
    NonFinite(String),

    #[error("too many failed samples: {excluded} of {total} excluded")]
    TooManyExcluded { excluded: usize, total: usize },

    #[error("grid too coarse: n = {n} cannot resolve the requested cube size; need n >= {minimal_n}")]
    GridTooCoarse { n: usize, minimal_n: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HomlabError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        HomlabError::InvalidInput(msg.into())
    }
}

/// Non-fatal condition attached to a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub code: String,
    pub message: String,
}

impl Warning {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Warning {
            code: code.to_string(),
            message: message.into(),
        }
    }
}
