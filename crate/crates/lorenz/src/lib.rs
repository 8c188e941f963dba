//! Forecasting the first Lorenz coordinate from noisy observations of it.
//!
//! - [`system`]: the vector field, its Jacobian and RK4.
//! - [`record`]: simulated observation records and targets.
//! - [`ekf`]: extended Kalman filter baseline and its integrated ensemble forecast.
//! - [`forecaster`]: the amortized kernel-mixture forecaster.
//! - [`scoring`]: interval scores, the paired comparison, calibration and mode counting.

pub mod ekf;
pub mod error;
pub mod forecaster;
pub mod record;
pub mod scoring;
pub mod system;

pub use error::{LorenzError, Result};
pub use record::{simulate_record, RecordConfig, RecordSimulator, TrajectoryRecord};
pub use system::LorenzState;
