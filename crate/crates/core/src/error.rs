use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate cluster {cluster}: member mean has zero norm")]
    DegenerateCluster { cluster: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("empty query after cleanup")]
    EmptyQuery,

    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("all {failed} generation requests failed")]
    AllRequestsFailed { failed: usize },

    #[error("alignment mismatch: {0}")]
    Alignment(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
