use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {what}")]
    Overflow { what: &'static str },

    #[error("invalid shard: {0}")]
    InvalidShard(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("power iteration did not converge after {iterations} iterations")]
    PowerIteration { iterations: usize },

    #[error(
        "client {client}: inner solver hit {max_iters} iterations, best residual {best_residual:e} > tolerance {tolerance:e}"
    )]
    InnerSolve {
        client: usize,
        max_iters: usize,
        best_residual: f64,
        tolerance: f64,
    },

    #[error("client {client}: local solver diverged (loss {loss:e} from start {start:e})")]
    Diverged { client: usize, start: f64, loss: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("need at least {needed} samples, have {available}")]
    NotEnoughSamples { needed: usize, available: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;
