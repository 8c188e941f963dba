//! Amortized reverse-KL inference: maximize `E_{k(x)} E_{q(z|x)}[log p(x, z) − log q(z | x)]`
//! with reparametrized Gaussian draws `z = μ(x) + σ(x) ε`.
//!
//! Unlike the forward loss this needs an evaluable, differentiable joint density.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::families::{gaussian_log_prob, MeanFieldGaussianHead, Network};
use crate::favi::{DivergenceGuard, Simulator, TrainConfig, TrainReport};
use crate::rng::substream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A model with `log p(x, z)` differentiable in `z`.
pub trait TractableJoint {
    fn latent_dim(&self) -> usize;
    fn observation_dim(&self) -> usize;
    /// Records `log p(x_i, z_i)` per row, `[batch, 1]`; `z` may depend on parameters.
    fn log_joint_on(&self, tape: &mut Tape, x: &Tensor, z: Var) -> Result<Var>;
}

/// Uniform resampling of a fixed set of observations.
#[derive(Clone, Debug)]
pub struct Resampler {
    data: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(data: Vec<Vec<f64>>) -> Result<Self> {
        let width = data.first().map(Vec::len).unwrap_or(0);
        if width == 0 || data.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidArgument(
                "resampler needs equal-length, non-empty rows".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Observation parts of `n` simulator draws.
    pub fn from_simulator<S, R>(sim: &S, n: usize, rng: &mut R) -> Result<Self>
    where
        S: Simulator<Sample = crate::favi::JointSample>,
        R: Rng + ?Sized,
    {
        Self::new(sim.draw_batch(n, rng)?.into_iter().map(|s| s.x).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn draw_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let rows: Vec<&[f64]> = (0..n)
            .map(|_| self.data[rng.random_range(0..self.data.len())].as_slice())
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Records the ELBO averaged over rows of `x` and `n_mc` reparametrized draws per row.
pub fn elbo_on<J, N, R>(
    tape: &mut Tape,
    joint: &J,
    head: &MeanFieldGaussianHead<N>,
    x: &Tensor,
    n_mc: usize,
    rng: &mut R,
) -> Result<Var>
where
    J: TractableJoint + ?Sized,
    N: Network,
    R: Rng + ?Sized,
{
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
    }
    let k = joint.latent_dim();
    let rows = x.rows();
    let tiled: Vec<&[f64]> = (0..n_mc).flat_map(|_| (0..rows).map(|i| x.row(i))).collect();
    let tiled = Tensor::from_rows(&tiled)?;
    let c = tape.constant(tiled.clone())?;
    let (mu, log_sigma) = head.moments(tape, c)?;
    let noise: Vec<f64> = (0..rows * n_mc * k).map(|_| StandardNormal.sample(rng)).collect();
    let eps = tape.constant(Tensor::new(&[rows * n_mc, k], noise)?)?;
    let sigma = tape.exp(log_sigma)?;
    let spread = tape.mul(sigma, eps)?;
    let z = tape.add(mu, spread)?;
    let log_q = gaussian_log_prob(tape, mu, log_sigma, z)?;
    let log_p = joint.log_joint_on(tape, &tiled, z)?;
    let gap = tape.sub(log_p, log_q)?;
    tape.mean(gap)
}

/// Monte Carlo ELBO estimate at the observations `x`.
pub fn elbo_estimate<J, N, R>(
    joint: &J,
    head: &MeanFieldGaussianHead<N>,
    x: &Tensor,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64>
where
    J: TractableJoint + ?Sized,
    N: Network,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let e = elbo_on(&mut tape, joint, head, x, n_mc, rng)?;
    Ok(tape.value(e).item())
}

/// Adam on the negative ELBO with single-draw reparametrized gradients and observations
/// resampled from `data`. The trace holds the per-step negative ELBO.
pub fn reverse_train<J, N>(
    joint: &J,
    head: &mut MeanFieldGaussianHead<N>,
    data: &Resampler,
    config: &TrainConfig,
) -> Result<TrainReport>
where
    J: TractableJoint + ?Sized,
    N: Network,
{
    config.validate()?;
    let mut data_rng = substream(config.seed, "data");
    let mut noise_rng = substream(config.seed, "reparam");
    let mut adam = AdamState::new(&head.graph, config.adam);
    let mut guard = DivergenceGuard::default();
    let mut report = TrainReport::default();
    for step in 0..config.total_steps() {
        adam.config.step_size = config.step_size_at(step);
        let x = data.draw_batch(config.batch_size, &mut data_rng)?;
        let mut tape = Tape::new();
        let loss = elbo_on(&mut tape, joint, head, &x, 1, &mut noise_rng)
            .and_then(|e| tape.scale(e, -1.0))
            .and_then(|l| {
                head.graph.backward(&tape, l, &Tensor::scalar(1.0))?;
                Ok(tape.value(l).item())
            });
        let loss = match loss {
            Ok(l) => l,
            Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient(_))) => {
                return Err(Error::Diverged {
                    step,
                    param_norm: head.graph.norm(),
                    reason: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        };
        adam.step(&mut head.graph)?;
        guard.check(step, loss, &head.graph)?;
        report.trace.push(loss);
    }
    Ok(report)
}
