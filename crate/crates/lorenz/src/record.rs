//! Simulated records: a Lorenz path observed through `y(t) ~ N(x₁(t), σ²)` on a regular grid,
//! plus the value `x₁(t*)` to forecast.

use favi_core::favi::Simulator;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{LorenzError, Result};
use crate::system::{integrate, Lorenz};

#[derive(Clone, Debug, PartialEq)]
pub struct RecordConfig {
    /// Integration step.
    pub dt: f64,
    /// Number of observations `M + 1`.
    pub n_obs: usize,
    pub obs_spacing: f64,
    /// `t* − t_M`.
    pub horizon: f64,
    /// Observation noise standard deviation.
    pub noise_sd: f64,
    /// Time integrated from the uniform initial draw before the first observation.
    pub burn_in: f64,
    pub box_lo: [f64; 3],
    pub box_hi: [f64; 3],
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            n_obs: 64,
            obs_spacing: 0.05,
            horizon: 0.5,
            noise_sd: 10.0,
            burn_in: 5.0,
            box_lo: [-20.0, -20.0, 0.0],
            box_hi: [20.0, 20.0, 50.0],
        }
    }
}

fn whole_steps(what: &str, span: f64, dt: f64) -> Result<usize> {
    let n = (span / dt).round();
    if span < 0.0 || (n * dt - span).abs() > 1e-9 * span.max(1.0) {
        return Err(LorenzError::InvalidConfig(format!(
            "{what} = {span} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

impl RecordConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.n_obs == 0 || !(self.noise_sd >= 0.0) {
            return Err(LorenzError::InvalidConfig(
                "dt, n_obs must be positive and noise_sd non-negative".into(),
            ));
        }
        if self.obs_spacing <= 0.0 {
            return Err(LorenzError::InvalidConfig("obs_spacing must be positive".into()));
        }
        whole_steps("obs_spacing", self.obs_spacing, self.dt)?;
        whole_steps("horizon", self.horizon, self.dt)?;
        whole_steps("burn_in", self.burn_in, self.dt)?;
        if self.box_lo.iter().zip(&self.box_hi).any(|(l, h)| !(l < h)) {
            return Err(LorenzError::InvalidConfig("initial box is empty".into()));
        }
        Ok(())
    }

    pub fn spacing_steps(&self) -> usize {
        (self.obs_spacing / self.dt).round() as usize
    }

    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// True states at the observation times.
    pub states: Vec<[f64; 3]>,
    pub observations: Vec<f64>,
    pub target_time: f64,
    /// `x₁(t*)`.
    pub target: f64,
    pub target_state: [f64; 3],
}

/// Uniform draw in the box, burn-in, then the observation window and the horizon.
pub fn simulate_record<R: Rng + ?Sized>(rng: &mut R, config: &RecordConfig) -> Result<TrajectoryRecord> {
    config.validate()?;
    let mut s: [f64; 3] = std::array::from_fn(|i| {
        Uniform::new(config.box_lo[i], config.box_hi[i])
            .expect("validated box")
            .sample(rng)
    });
    s = integrate(&Lorenz, s, config.dt, config.burn_in_steps())?;
    let mut times = Vec::with_capacity(config.n_obs);
    let mut states = Vec::with_capacity(config.n_obs);
    let mut observations = Vec::with_capacity(config.n_obs);
    for m in 0..config.n_obs {
        if m > 0 {
            s = integrate(&Lorenz, s, config.dt, config.spacing_steps())?;
        }
        let e: f64 = StandardNormal.sample(rng);
        times.push(m as f64 * config.obs_spacing);
        states.push(s);
        observations.push(s[0] + config.noise_sd * e);
    }
    let target_state = integrate(&Lorenz, s, config.dt, config.horizon_steps())?;
    Ok(TrajectoryRecord {
        target_time: times[config.n_obs - 1] + config.horizon,
        times,
        states,
        observations,
        target: target_state[0],
        target_state,
    })
}

/// [`simulate_record`] as a sampling interface.
#[derive(Clone, Debug, Default)]
pub struct RecordSimulator {
    pub config: RecordConfig,
}

impl Simulator for RecordSimulator {
    type Sample = TrajectoryRecord;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> favi_core::Result<TrajectoryRecord> {
        simulate_record(rng, &self.config).map_err(|e| favi_core::Error::InvalidArgument(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use favi_core::rng::substream;

    #[test]
    fn noiseless_observations_are_exact() {
        let cfg = RecordConfig {
            noise_sd: 0.0,
            ..RecordConfig::default()
        };
        let r = simulate_record(&mut substream(0, "sim"), &cfg).unwrap();
        assert_eq!(r.observations.len(), 64);
        for (y, s) in r.observations.iter().zip(&r.states) {
            assert_eq!(*y, s[0]);
        }
        assert!((r.target_time - (63.0 * 0.05 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_horizon_targets_the_last_state() {
        let cfg = RecordConfig {
            horizon: 0.0,
            ..RecordConfig::default()
        };
        let r = simulate_record(&mut substream(1, "sim"), &cfg).unwrap();
        assert_eq!(r.target, r.states.last().unwrap()[0]);
    }

    #[test]
    fn records_are_deterministic() {
        let cfg = RecordConfig::default();
        let a = simulate_record(&mut substream(2, "sim"), &cfg).unwrap();
        let b = simulate_record(&mut substream(2, "sim"), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.times.windows(2).all(|w| w[0] < w[1]) && *a.times.last().unwrap() < a.target_time);
    }

    #[test]
    fn misaligned_grids_are_rejected() {
        let cfg = RecordConfig {
            obs_spacing: 0.033,
            ..RecordConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
