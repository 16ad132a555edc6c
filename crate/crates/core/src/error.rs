use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FmcError>;

#[derive(Debug, Error)]
pub enum FmcError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sensitive attribute is degenerate: {0}")]
    GroupDegenerate(String),

    #[error("subsample of size {n} misses a group after {retries} draws")]
    GroupMissing { n: usize, retries: usize },

    #[error("row {row} has zero norm and cannot be L2-normalized")]
    ZeroVector { row: usize },

    #[error("`{field}` is not a probability vector: {reason}")]
    InvalidSimplex { field: String, reason: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl FmcError {
    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            FmcError::Io { .. } => "E_IO",
            FmcError::Csv(_) => "E_CSV",
            FmcError::Json(_) => "E_JSON",
            FmcError::Parse { .. } => "E_PARSE",
            FmcError::Schema(_) => "E_SCHEMA",
            FmcError::EmptyDataset => "E_EMPTY",
            FmcError::GroupDegenerate(_) => "E_GROUP",
            FmcError::GroupMissing { .. } => "E_GROUP_MISSING",
            FmcError::ZeroVector { .. } => "E_ZERO_VECTOR",
            FmcError::InvalidSimplex { .. } => "E_SIMPLEX",
            FmcError::Dimension { .. } => "E_DIM",
            FmcError::NonFinite(_) => "E_NONFINITE",
            FmcError::Config(_) => "E_CONFIG",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FmcError::Io {
            path: path.into(),
            source,
        }
    }
}
