//! Forward amortized variational inference on a small reverse-mode autodiff engine.
//!
//! - [`tape`], [`tensor`], [`nn`], [`adam`], [`gradcheck`], [`checkpoint`]: the numerical core.
//! - [`families`]: conditional density heads `q(z | x)`.
//! - [`favi`]: the forward amortized loss, training loop and reconstruction metrics.
//! - [`reverse_kl`]: amortized ELBO training with reparametrized Gaussian heads.
//! - [`oracles`]: exact posteriors (linear-Gaussian, enumerable discrete) for validation.
//! - [`synthetic`], [`experiments`]: the shared nonlinear generator and the end-to-end studies.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod families;
pub mod favi;
pub mod gradcheck;
pub mod nn;
pub mod oracles;
pub mod reverse_kl;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{ParamGraph, ParamId, Tape, Var};
pub use tensor::Tensor;
