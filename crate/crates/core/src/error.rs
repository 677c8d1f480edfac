use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the nowcasting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{solver} did not converge after {iterations} iterations (final gap {gap:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        gap: f64,
    },

    #[error("score table is missing {} sentence id(s): {}", .0.len(), .0.join(", "))]
    MissingScores(Vec<String>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("unsupported artifact version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
