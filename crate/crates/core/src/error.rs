use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate column `{0}`: zero variance over the training split")]
    DegenerateColumn(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("encoding error: level {level} out of range for cardinality {cardinality}")]
    Encoding { level: usize, cardinality: usize },

    #[error("log-domain violation for source {source_id} at x = {x:?}, theta = {theta:?}")]
    Domain {
        source_id: usize,
        x: f64,
        theta: Vec<f64>,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss in term `{term}` at epoch {epoch}")]
    NonFinite { term: String, epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Contract(_) => ErrorClass::Config,
            Error::Schema(_)
            | Error::Consistency(_)
            | Error::Data(_)
            | Error::DegenerateColumn(_)
            | Error::Split(_)
            | Error::Shape { .. }
            | Error::Encoding { .. }
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::Domain { .. } | Error::Generation(_) | Error::NonFinite { .. } => {
                ErrorClass::Numeric
            }
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
