use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its allowed domain. `field` is a dotted path.
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("cannot split {n} samples with fraction {fraction}: sizes would be ({left}, {right})")]
    Split {
        n: usize,
        fraction: f64,
        left: usize,
        right: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("optimization failed at epoch {epoch}: {message}")]
    Optimization { epoch: usize, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("replication {replication} failed: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }

    /// Validation errors are caller mistakes; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::Json(_) => true,
            Error::Replication { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
