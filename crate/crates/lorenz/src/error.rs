use thiserror::Error;

pub type Result<T, E = LorenzError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LorenzError {
    #[error("integration blew up at t = {time:.4}")]
    BlowUp { time: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("filter covariance is not positive definite after jitter (step {step})")]
    Indefinite { step: usize },
    #[error("too many ensemble members blew up ({discarded} of {requested})")]
    EnsembleBlowUp { discarded: usize, requested: usize },
    #[error("checkpoint missing: {0}")]
    CheckpointMissing(String),
    #[error(transparent)]
    Core(#[from] favi_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
