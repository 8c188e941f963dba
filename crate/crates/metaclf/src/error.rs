use thiserror::Error;

pub type Result<T, E = MetaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("posterior over ensemble members is degenerate: every weight underflowed")]
    Degenerate,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{path}: {message}")]
    Data { path: String, message: String },
    #[error("dataset has {rows} rows, need more than {needed}")]
    TooSmall { rows: usize, needed: usize },
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(String),
    #[error(transparent)]
    Core(#[from] favi_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
