//! Amortized Bayesian classification from tiny training sets.
//!
//! Tasks are two-class Gaussian problems drawn from a fixed family. A meta-classifier trained
//! with FAVI on simulated `(D, x*, y*)` learns `p(y* | x*, D)` with the task marginalized out;
//! on a finite ensemble it can be checked against exact Bayesian model averaging.

pub mod baselines;
pub mod data;
pub mod encoder;
pub mod error;
pub mod oracle;
pub mod task;
pub mod train;

pub use error::{MetaError, Result};
pub use task::{EnsembleConfig, FiniteEnsemble, LabeledPoint, TaskInstance, TaskModel};
