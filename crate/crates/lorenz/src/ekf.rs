//! Extended Kalman filter for partially observed dynamics and the ensemble forecast built on it.
//!
//! Between observations the mean follows RK4 and the covariance follows the transition matrix
//! `Φ` of the linearized flow, integrated alongside the mean (`Φ̇ = J(s) Φ`). There is no
//! process noise; `jitter · I` is added after each propagation for numerical definiteness.

use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LorenzError, Result};
use crate::record::{simulate_record, RecordConfig};
use crate::system::{integrate, rk4, Dynamics, Lorenz, BLOW_UP};

#[derive(Clone, Debug, PartialEq)]
pub struct EkfConfig {
    pub dt: f64,
    pub obs_spacing: f64,
    pub noise_sd: f64,
    pub jitter: f64,
}

impl EkfConfig {
    pub fn from_record(config: &RecordConfig) -> Self {
        Self {
            dt: config.dt,
            obs_spacing: config.obs_spacing,
            noise_sd: config.noise_sd,
            jitter: 1e-9,
        }
    }

    fn spacing_steps(&self) -> usize {
        (self.obs_spacing / self.dt).round() as usize
    }
}

/// Gaussian belief over the state at the last observation time.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfBelief {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EkfDiagnostics {
    /// Largest `|P − Pᵀ|` entry seen before any symmetrization.
    pub max_asymmetry: f64,
    /// Largest filtered `x₃` variance over the run.
    pub max_x3_variance: f64,
}

/// Mean and transition matrix after `steps` RK4 steps of the joint state/variational system.
fn propagate<D: Dynamics + ?Sized>(
    dynamics: &D,
    mean: &Vector3<f64>,
    dt: f64,
    steps: usize,
) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let mut y = [0.0; 12];
    y[..3].copy_from_slice(mean.as_slice());
    for i in 0..3 {
        y[3 + 4 * i] = 1.0;
    }
    let field = |v: &[f64; 12]| {
        let s = [v[0], v[1], v[2]];
        let f = dynamics.derivative(&s);
        let j = dynamics.jacobian(&s);
        let mut out = [0.0; 12];
        out[..3].copy_from_slice(&f);
        for r in 0..3 {
            for c in 0..3 {
                out[3 + 3 * r + c] = (0..3).map(|k| j[r][k] * v[3 + 3 * k + c]).sum();
            }
        }
        out
    };
    for i in 0..steps {
        y = rk4(field, &y, dt);
        if y[..3].iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(LorenzError::BlowUp {
                time: (i + 1) as f64 * dt,
            });
        }
    }
    let phi = Matrix3::from_fn(|r, c| y[3 + 3 * r + c]);
    Ok((Vector3::new(y[0], y[1], y[2]), phi))
}

fn asymmetry(p: &Matrix3<f64>) -> f64 {
    (p - p.transpose()).abs().max()
}

fn symmetrize(p: &Matrix3<f64>) -> Matrix3<f64> {
    0.5 * (p + p.transpose())
}

/// Joseph-form update on `x₁` with observation variance `r`.
fn observe(mean: &mut Vector3<f64>, cov: &mut Matrix3<f64>, y: f64, r: f64) {
    let s = cov[(0, 0)] + r;
    if !(s > 0.0) {
        return;
    }
    let k: Vector3<f64> = cov.column(0) / s;
    *mean += k * (y - mean[0]);
    let mut ikh = Matrix3::identity();
    ikh.set_column(0, &(Vector3::x() - k));
    *cov = ikh * *cov * ikh.transpose() + k * k.transpose() * r;
}

fn check_psd(cov: &Matrix3<f64>, jitter: f64, step: usize) -> Result<()> {
    let shifted = cov + Matrix3::identity() * jitter;
    if cov.iter().any(|v| !v.is_finite()) || shifted.cholesky().is_none() {
        return Err(LorenzError::Indefinite { step });
    }
    Ok(())
}

/// Filters `observations` (one per grid point, first at the prior's time) under any dynamics.
pub fn ekf_filter_with<D: Dynamics + ?Sized>(
    dynamics: &D,
    observations: &[f64],
    config: &EkfConfig,
    prior: &EkfBelief,
) -> Result<(EkfBelief, EkfDiagnostics)> {
    if observations.is_empty() || !(config.dt > 0.0) || config.spacing_steps() == 0 {
        return Err(LorenzError::InvalidConfig(
            "need observations and a positive step and spacing".into(),
        ));
    }
    let r = config.noise_sd * config.noise_sd;
    let mut mean = prior.mean;
    let mut cov = prior.cov;
    let mut diag = EkfDiagnostics::default();
    for (m, &y) in observations.iter().enumerate() {
        if m > 0 {
            let (next, phi) = propagate(dynamics, &mean, config.dt, config.spacing_steps())?;
            mean = next;
            cov = phi * cov * phi.transpose();
            diag.max_asymmetry = diag.max_asymmetry.max(asymmetry(&cov));
            cov = symmetrize(&cov) + Matrix3::identity() * config.jitter;
        }
        observe(&mut mean, &mut cov, y, r);
        diag.max_asymmetry = diag.max_asymmetry.max(asymmetry(&cov));
        cov = symmetrize(&cov);
        check_psd(&cov, config.jitter, m)?;
        diag.max_x3_variance = diag.max_x3_variance.max(cov[(2, 2)]);
    }
    Ok((EkfBelief { mean, cov }, diag))
}

/// Lorenz filtering from [`climatology`].
pub fn ekf_filter(observations: &[f64], config: &RecordConfig) -> Result<(EkfBelief, EkfDiagnostics)> {
    config.validate()?;
    if observations.len() != config.n_obs {
        return Err(LorenzError::InvalidConfig(format!(
            "expected {} observations, got {}",
            config.n_obs,
            observations.len()
        )));
    }
    ekf_filter_with(
        &Lorenz,
        observations,
        &EkfConfig::from_record(config),
        climatology(config),
    )
}

const CLIMATOLOGY_DRAWS: usize = 4000;
const CLIMATOLOGY_SEED: u64 = 0x00C1_1A7E;

static DEFAULT_CLIMATOLOGY: OnceLock<EkfBelief> = OnceLock::new();

/// Moment-matched Gaussian of the state at the first observation, estimated from seeded records.
pub fn climatology(config: &RecordConfig) -> &'static EkfBelief {
    let compute = |cfg: &RecordConfig| {
        let mut rng = favi_core::rng::substream(CLIMATOLOGY_SEED, "climatology");
        let cfg = RecordConfig {
            n_obs: 1,
            horizon: 0.0,
            ..cfg.clone()
        };
        let states: Vec<Vector3<f64>> = (0..CLIMATOLOGY_DRAWS)
            .map(|_| simulate_record(&mut rng, &cfg).map(|r| Vector3::from(r.states[0])))
            .collect::<Result<_>>()
            .expect("climatology simulation is bounded");
        let n = states.len() as f64;
        let mean = states.iter().sum::<Vector3<f64>>() / n;
        let cov = states
            .iter()
            .map(|s| (s - mean) * (s - mean).transpose())
            .sum::<Matrix3<f64>>()
            / (n - 1.0);
        EkfBelief { mean, cov }
    };
    let default = RecordConfig::default();
    if config.box_lo == default.box_lo
        && config.box_hi == default.box_hi
        && config.burn_in == default.burn_in
        && config.dt == default.dt
    {
        DEFAULT_CLIMATOLOGY.get_or_init(|| compute(config))
    } else {
        Box::leak(Box::new(compute(config)))
    }
}

/// Exact Kalman filter for `ṡ = A s` observed through `x₁`, with `exp(AΔ)` transitions.
pub fn linear_kalman(a: &Matrix3<f64>, observations: &[f64], config: &EkfConfig, prior: &EkfBelief) -> EkfBelief {
    let f = (a * config.obs_spacing).exp();
    let r = config.noise_sd * config.noise_sd;
    let mut mean = prior.mean;
    let mut cov = prior.cov;
    for (m, &y) in observations.iter().enumerate() {
        if m > 0 {
            mean = f * mean;
            cov = f * cov * f.transpose() + Matrix3::identity() * config.jitter;
        }
        let s = cov[(0, 0)] + r;
        let k: Vector3<f64> = cov.column(0) / s;
        mean += k * (y - mean[0]);
        cov = cov - k * cov.row(0);
        cov = symmetrize(&cov);
    }
    EkfBelief { mean, cov }
}

/// Square-root factor `L` with `L Lᵀ = cov`; negative eigenvalues are clipped to zero.
pub fn covariance_factor(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(symmetrize(cov));
    let mut l = eig.eigenvectors;
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// `n` ensemble forecasts of `x₁` after `horizon_steps` steps, from initial states drawn from
/// the belief. Members that blow up are redrawn; more than `n / 10` discards is an error.
pub fn ekf_forecast<R: Rng + ?Sized>(
    belief: &EkfBelief,
    n: usize,
    dt: f64,
    horizon_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(LorenzError::InvalidConfig("ensemble size must be at least 1".into()));
    }
    let l = covariance_factor(&belief.cov);
    let mut out = Vec::with_capacity(n);
    let mut discarded = 0;
    while out.len() < n {
        let e = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let s0 = belief.mean + l * e;
        match integrate(&Lorenz, [s0[0], s0[1], s0[2]], dt, horizon_steps) {
            Ok(s) => out.push(s[0]),
            Err(LorenzError::BlowUp { .. }) => {
                discarded += 1;
                if discarded > n / 10 {
                    return Err(LorenzError::EnsembleBlowUp {
                        discarded,
                        requested: n,
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
