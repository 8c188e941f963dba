//! Forward amortized variational inference.
//!
//! The loss is `L = −E_{p(x,z)}[log q(z | x)]`, estimated on fresh simulator draws. Only
//! samples from the model joint are needed: the expectation is over `p` and the gradient
//! is taken through `q` alone, so neither the joint density nor a reparametrization of
//! the simulator is required.
//!
//! When a sample carries a nuisance block `ξ`, the loss simply never looks at it; the head
//! then learns the marginal posterior `p(z | x)`.

use std::path::PathBuf;

use rand::Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::families::ConditionalDensity;
use crate::rng::{substream, StreamRng};
use crate::tape::{ParamGraph, Tape, Var};
use crate::tensor::Tensor;

/// One draw `(z, ξ, x)` from a simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    pub z: Vec<f64>,
    pub xi: Option<Vec<f64>>,
    pub x: Vec<f64>,
}

impl JointSample {
    pub fn new(z: Vec<f64>, x: Vec<f64>) -> Self {
        Self { z, xi: None, x }
    }
}

/// Sampling-only access to a model joint distribution.
pub trait Simulator {
    type Sample;
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Sample>;

    fn draw_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Self::Sample>> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

/// Simulators whose observations can be regenerated from a latent (`x̂ ~ p(x̂ | ẑ)`).
pub trait Decoder {
    fn decode<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>>;
}

/// A model trainable on batches of `S` by minimizing the FAVI loss.
pub trait FaviModel<S> {
    fn graph(&self) -> &ParamGraph;
    fn graph_mut(&mut self) -> &mut ParamGraph;
    fn descriptor(&self) -> String;
    /// `log q(target_i | condition_i)` per sample, `[batch, 1]`.
    fn batch_log_q(&self, tape: &mut Tape, batch: &[S]) -> Result<Var>;
}

/// Stacks `(x, z)` of joint samples into condition / latent matrices, dropping `ξ`.
pub fn stack_batch(batch: &[JointSample]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&[f64]> = batch.iter().map(|s| s.x.as_slice()).collect();
    let zs: Vec<&[f64]> = batch.iter().map(|s| s.z.as_slice()).collect();
    Ok((Tensor::from_rows(&xs)?, Tensor::from_rows(&zs)?))
}

impl<H: ConditionalDensity> FaviModel<JointSample> for H {
    fn graph(&self) -> &ParamGraph {
        ConditionalDensity::graph(self)
    }
    fn graph_mut(&mut self) -> &mut ParamGraph {
        ConditionalDensity::graph_mut(self)
    }
    fn descriptor(&self) -> String {
        ConditionalDensity::descriptor(self)
    }
    fn batch_log_q(&self, tape: &mut Tape, batch: &[JointSample]) -> Result<Var> {
        let (x, z) = stack_batch(batch)?;
        self.log_prob_on(tape, &x, &z)
    }
}

/// Records `−(1/B) Σ log q(z_i | x_i)` on `tape`.
pub fn favi_loss_on<S, M: FaviModel<S> + ?Sized>(tape: &mut Tape, model: &M, batch: &[S]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let lp = model.batch_log_q(tape, batch)?;
    let m = tape.mean(lp)?;
    tape.scale(m, -1.0)
}

pub fn favi_loss<S, M: FaviModel<S> + ?Sized>(batch: &[S], model: &M) -> Result<f64> {
    let mut tape = Tape::new();
    let l = favi_loss_on(&mut tape, model, batch)?;
    Ok(tape.value(l).item())
}

/// Loss and its parameter gradient on a fixed batch; gradients are left in the model graph.
pub fn favi_gradient<S, M: FaviModel<S> + ?Sized>(model: &mut M, batch: &[S]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = favi_loss_on(&mut tape, &*model, batch)?;
    let value = tape.value(l).item();
    model.graph_mut().backward(&tape, l, &Tensor::scalar(1.0))?;
    Ok(value)
}

/// Draws a fresh batch, back-propagates the FAVI loss and applies one Adam update.
pub fn favi_train_step<Sim, M, R>(
    sim: &Sim,
    model: &mut M,
    adam: &mut AdamState,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64>
where
    Sim: Simulator,
    M: FaviModel<Sim::Sample> + ?Sized,
    R: Rng + ?Sized,
{
    let batch = sim.draw_batch(batch_size, rng)?;
    let loss = favi_gradient(model, &batch)?;
    adam.step(model.graph_mut())?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub adam: AdamConfig,
    /// Step size decays geometrically to `step_size × final_lr_fraction` over the run.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (requires `checkpoint_dir`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            epochs: 100,
            samples_per_epoch: 10_000,
            adam: AdamConfig::default(),
            final_lr_fraction: 1.0,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples_per_epoch == 0 {
            return Err(Error::InvalidArgument(
                "batch size and samples per epoch must be positive".into(),
            ));
        }
        if !(self.final_lr_fraction > 0.0) || !(self.adam.step_size >= 0.0) {
            return Err(Error::InvalidArgument("learning-rate settings must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::InvalidArgument("checkpoint cadence must be positive".into()));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::InvalidArgument(
                "checkpoint cadence set without a directory".into(),
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.samples_per_epoch / self.batch_size).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn step_size_at(&self, step: usize) -> f64 {
        let total = self.total_steps().max(1) as f64;
        self.adam.step_size * self.final_lr_fraction.powf(step as f64 / total)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Per-step training loss.
    pub trace: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Trailing mean over the last 10% of steps (at least one step).
    pub fn smoothed_final_loss(&self) -> Option<f64> {
        if self.trace.is_empty() {
            return None;
        }
        let n = (self.trace.len() / 10).max(1);
        let tail = &self.trace[self.trace.len() - n..];
        Some(tail.iter().sum::<f64>() / n as f64)
    }
}

/// Aborts when the loss is non-finite, or exceeds ten times the magnitude of the first
/// loss for 100 consecutive steps.
#[derive(Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    run: usize,
}

impl DivergenceGuard {
    pub const PATIENCE: usize = 100;

    pub fn check(&mut self, step: usize, loss: f64, graph: &ParamGraph) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                param_norm: graph.norm(),
                reason: format!("loss is {loss}"),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial.abs() && loss > initial {
            self.run += 1;
            if self.run >= Self::PATIENCE {
                return Err(Error::Diverged {
                    step,
                    param_norm: graph.norm(),
                    reason: format!("loss {loss:.4e} above 10x initial {initial:.4e} for {} steps", self.run),
                });
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

/// Full training run: `epochs × (samples_per_epoch / batch_size)` Adam steps on fresh
/// simulator draws from the `"sim"` substream of `config.seed`.
pub fn train<Sim, M>(sim: &Sim, model: &mut M, config: &TrainConfig) -> Result<TrainReport>
where
    Sim: Simulator,
    M: FaviModel<Sim::Sample> + ?Sized,
{
    config.validate()?;
    let mut rng: StreamRng = substream(config.seed, "sim");
    train_with_rng(sim, model, config, &mut rng)
}

pub fn train_with_rng<Sim, M, R>(sim: &Sim, model: &mut M, config: &TrainConfig, rng: &mut R) -> Result<TrainReport>
where
    Sim: Simulator,
    M: FaviModel<Sim::Sample> + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let mut adam = AdamState::new(model.graph(), config.adam);
    let mut guard = DivergenceGuard::default();
    let mut report = TrainReport::default();
    let per_epoch = config.steps_per_epoch();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        for _ in 0..per_epoch {
            adam.config.step_size = config.step_size_at(step);
            let loss = match favi_train_step(sim, model, &mut adam, config.batch_size, rng) {
                Ok(loss) => loss,
                Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient(_))) => {
                    return Err(Error::Diverged {
                        step,
                        param_norm: model.graph().norm(),
                        reason: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            };
            guard.check(step, loss, model.graph())?;
            report.trace.push(loss);
            step += 1;
        }
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if epoch % every == 0 {
                let path = dir.join(format!("epoch_{epoch:05}.ckpt"));
                checkpoint::save(&path, &model.descriptor(), model.graph())?;
                report.checkpoints.push(path);
            }
        }
    }
    Ok(report)
}

/// Per-draw latent errors `(1/N) Σ_j (z_j − ẑ_j)²` with `(z, x) ~ p` and `ẑ ~ q(· | x)`.
pub fn latent_reconstruction_errors<Sim, H, R>(sim: &Sim, head: &H, n: usize, rng: &mut R) -> Result<Vec<f64>>
where
    Sim: Simulator<Sample = JointSample>,
    H: ConditionalDensity,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("reconstruction needs at least one draw".into()));
    }
    let batch = sim.draw_batch(n, rng)?;
    latent_errors_on(&batch, head, rng)
}

/// Latent errors on given joint draws, so several heads can share them.
pub fn latent_errors_on<H, R>(batch: &[JointSample], head: &H, rng: &mut R) -> Result<Vec<f64>>
where
    H: ConditionalDensity,
    R: Rng + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::InvalidArgument("reconstruction needs at least one draw".into()));
    }
    let (x, z) = stack_batch(batch)?;
    let z_hat = head.sample(&x, rng)?;
    Ok((0..batch.len()).map(|i| mean_squared(z.row(i), z_hat.row(i))).collect())
}

pub fn latent_reconstruction_error<Sim, H, R>(sim: &Sim, head: &H, n: usize, rng: &mut R) -> Result<f64>
where
    Sim: Simulator<Sample = JointSample>,
    H: ConditionalDensity,
    R: Rng + ?Sized,
{
    Ok(mean(&latent_reconstruction_errors(sim, head, n, rng)?))
}

/// Per-observation errors `(1/M) Σ_j (x_j − x̂_j)²` with `ẑ ~ q(· | x)`, `x̂ ~ p(x̂ | ẑ)`,
/// where `observations` plays the role of the data distribution.
pub fn observable_reconstruction_errors<D, H, R>(
    decoder: &D,
    head: &H,
    observations: &[Vec<f64>],
    rng: &mut R,
) -> Result<Vec<f64>>
where
    D: Decoder,
    H: ConditionalDensity,
    R: Rng + ?Sized,
{
    if observations.is_empty() {
        return Err(Error::InvalidArgument(
            "reconstruction needs at least one observation".into(),
        ));
    }
    let x = Tensor::from_rows(observations)?;
    let z_hat = head.sample(&x, rng)?;
    (0..observations.len())
        .map(|i| {
            let x_hat = decoder.decode(z_hat.row(i), rng)?;
            if x_hat.len() != observations[i].len() {
                return Err(Error::shape("decode", &[observations[i].len()], &[x_hat.len()]));
            }
            Ok(mean_squared(&observations[i], &x_hat))
        })
        .collect()
}

pub fn observable_reconstruction_error<D, H, R>(
    decoder: &D,
    head: &H,
    observations: &[Vec<f64>],
    rng: &mut R,
) -> Result<f64>
where
    D: Decoder,
    H: ConditionalDensity,
    R: Rng + ?Sized,
{
    Ok(mean(&observable_reconstruction_errors(
        decoder,
        head,
        observations,
        rng,
    )?))
}

fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Writes a loss trace as `step,loss` CSV.
pub fn write_trace_csv(path: &std::path::Path, trace: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{BernoulliHead, MeanFieldGaussianHead};
    use crate::nn::{Activation, Mlp};
    use rand_distr::{Distribution, StandardNormal};

    /// `z ~ N(0, 1)`, `x | z ~ N(z, 1)`.
    struct Conjugate;

    impl Simulator for Conjugate {
        type Sample = JointSample;
        fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
            let z: f64 = StandardNormal.sample(rng);
            let e: f64 = StandardNormal.sample(rng);
            Ok(JointSample::new(vec![z], vec![z + e]))
        }
    }

    /// `z ∈ {0,1}`, `x ∈ {0,1}` one-hot, from a fixed 2×2 table.
    struct Toy {
        table: [[f64; 2]; 2],
    }

    impl Simulator for Toy {
        type Sample = JointSample;
        fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for z in 0..2 {
                for x in 0..2 {
                    acc += self.table[z][x];
                    if u < acc || (z == 1 && x == 1) {
                        let mut onehot = vec![0.0; 2];
                        onehot[x] = 1.0;
                        return Ok(JointSample::new(vec![z as f64], onehot));
                    }
                }
            }
            unreachable!()
        }
    }

    fn gaussian_head(seed: u64) -> MeanFieldGaussianHead {
        let mut g = ParamGraph::new();
        let mut rng = substream(seed, "init");
        let net = Mlp::new(&mut g, "q", &[1, 32, 32, 2], Activation::Tanh, &mut rng).unwrap();
        MeanFieldGaussianHead::new(net, g).unwrap()
    }

    fn config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            adam: AdamConfig {
                step_size: 3e-3,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_is_negated_mean_log_density() {
        // Zero network: μ = 0, log σ = 0, and z chosen so that log q = −1.2.
        let mut head = gaussian_head(0);
        for id in head.graph.ids().collect::<Vec<_>>() {
            head.graph.value_mut(id).data_mut().fill(0.0);
        }
        let z = (2.0 * (1.2 - crate::families::HALF_LN_2PI)).sqrt();
        let batch = [JointSample::new(vec![z], vec![0.4])];
        assert!((favi_loss(&batch, &head).unwrap() - 1.2).abs() < 1e-12);
        assert!(favi_loss(&[], &head).is_err());
    }

    #[test]
    fn ignores_nuisance_block() {
        let head = gaussian_head(1);
        let plain = [JointSample::new(vec![0.3], vec![1.0])];
        let with_xi = [JointSample {
            xi: Some(vec![5.0, -2.0]),
            ..plain[0].clone()
        }];
        assert_eq!(favi_loss(&plain, &head).unwrap(), favi_loss(&with_xi, &head).unwrap());
    }

    #[test]
    fn exact_conditional_gives_conditional_entropy() {
        let toy = Toy {
            table: [[0.3, 0.1], [0.2, 0.4]],
        };
        // H(z|x) by enumeration: p(x=0) = 0.5 with z|x=0 = (0.6, 0.4); p(x=1) = 0.5 with (0.2, 0.8).
        let h = |p: &[f64]| -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let entropy = 0.5 * h(&[0.6, 0.4]) + 0.5 * h(&[0.2, 0.8]);
        let mut g = ParamGraph::new();
        let mut rng = substream(0, "init");
        let net = Mlp::new(&mut g, "q", &[2, 1], Activation::Identity, &mut rng).unwrap();
        // logit(q(z=1|x)) = w·onehot(x) with w = (logit 0.4, logit 0.8).
        let layer = &net.layers()[0];
        g.value_mut(layer.weight)
            .data_mut()
            .copy_from_slice(&[(0.4f64 / 0.6).ln(), 4f64.ln()]);
        g.value_mut(layer.bias).data_mut().fill(0.0);
        let head = BernoulliHead::new(net, g);
        let mut rng = substream(1, "sim");
        let batch = toy.draw_batch(400_000, &mut rng).unwrap();
        let loss = favi_loss(&batch, &head).unwrap();
        // Monte Carlo standard error is below 1e-3 at this sample count.
        assert!((loss - entropy).abs() < 4e-3, "{loss} vs {entropy}");
    }

    #[test]
    fn deterministic_posterior_has_zero_loss() {
        let mut g = ParamGraph::new();
        let mut rng = substream(0, "init");
        let net = Mlp::new(&mut g, "q", &[1, 1], Activation::Identity, &mut rng).unwrap();
        let layer = &net.layers()[0];
        g.value_mut(layer.weight).data_mut().fill(80.0);
        g.value_mut(layer.bias).data_mut().fill(-40.0);
        let head = BernoulliHead::new(net, g);
        let batch = [
            JointSample::new(vec![1.0], vec![1.0]),
            JointSample::new(vec![0.0], vec![0.0]),
        ];
        assert!(favi_loss(&batch, &head).unwrap() < 1e-15);
    }

    #[test]
    fn conjugate_gaussian_posterior_is_recovered() {
        let mut head = gaussian_head(3);
        let report = train(&Conjugate, &mut head, &config(100, 7)).unwrap();
        assert_eq!(report.trace.len(), 5000);
        let (mu, sd) = head.mean_sd(&Tensor::new(&[1, 1], vec![2.0]).unwrap()).unwrap();
        assert!((mu[0][0] - 1.0).abs() < 0.05, "mean {}", mu[0][0]);
        assert!((sd[0][0] - 0.5f64.sqrt()).abs() < 0.03, "sd {}", sd[0][0]);
        let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * 0.5).ln();
        let smoothed = report.smoothed_final_loss().unwrap();
        assert!((smoothed - entropy).abs() < 0.05, "{smoothed} vs {entropy}");

        // Exact posterior N(x/2, 1/2): latent error tends to 2 × 0.5.
        let mut rng = substream(9, "eval");
        let trained = latent_reconstruction_error(&Conjugate, &head, 20_000, &mut rng).unwrap();
        assert!((trained - 1.0).abs() < 0.05, "{trained}");
        let untrained = latent_reconstruction_error(&Conjugate, &gaussian_head(3), 20_000, &mut rng).unwrap();
        assert!(untrained > trained);
    }

    #[test]
    fn zero_step_size_leaves_parameters() {
        let mut head = gaussian_head(4);
        let before = head.graph.flat_values();
        let mut cfg = config(1, 0);
        cfg.adam.step_size = 0.0;
        let report = train(&Conjugate, &mut head, &cfg).unwrap();
        assert_eq!(head.graph.flat_values(), before);
        assert!(report.trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut head = gaussian_head(5);
        let before = head.graph.flat_values();
        let report = train(&Conjugate, &mut head, &config(0, 0)).unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(report.smoothed_final_loss(), None);
        assert_eq!(head.graph.flat_values(), before);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let run = || {
            let mut head = gaussian_head(6);
            let cfg = TrainConfig {
                samples_per_epoch: 2000,
                ..config(3, 11)
            };
            let r = train(&Conjugate, &mut head, &cfg).unwrap();
            (r.trace, head.graph.flat_values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn minibatch_gradients_average_to_pooled_gradient() {
        let mut head = gaussian_head(8);
        let mut rng = substream(2, "sim");
        let batches: Vec<Vec<JointSample>> = (0..1000).map(|_| Conjugate.draw_batch(4, &mut rng).unwrap()).collect();
        let mut per_batch = Vec::new();
        for b in &batches {
            favi_gradient(&mut head, b).unwrap();
            per_batch.push(head.graph.flat_grads().unwrap());
            head.graph.clear_grads();
        }
        let pooled: Vec<JointSample> = batches.concat();
        favi_gradient(&mut head, &pooled).unwrap();
        let pooled_grad = head.graph.flat_grads().unwrap();
        let n = per_batch.len() as f64;
        for (j, &target) in pooled_grad.iter().enumerate() {
            let m = per_batch.iter().map(|g| g[j]).sum::<f64>() / n;
            let var = per_batch.iter().map(|g| (g[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(
                (m - target).abs() <= 3.0 * se + 1e-12,
                "coord {j}: {m} vs {target} (se {se})"
            );
        }
    }

    #[test]
    fn favi_loss_gradient_matches_finite_differences() {
        let mut head = gaussian_head(10);
        let mut rng = substream(3, "sim");
        let batch = Conjugate.draw_batch(16, &mut rng).unwrap();
        let probe = head.clone();
        let err = crate::gradcheck::finite_diff_check(
            &mut head.graph,
            |g, tape| {
                let mut h = probe.clone();
                h.graph = g.clone();
                favi_loss_on(tape, &h, &batch)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn guard_trips_on_sustained_blow_up() {
        let g = ParamGraph::new();
        let mut guard = DivergenceGuard::default();
        guard.check(0, 1.0, &g).unwrap();
        for s in 1..DivergenceGuard::PATIENCE {
            guard.check(s, 50.0, &g).unwrap();
        }
        guard.check(200, 2.0, &g).unwrap();
        for s in 0..DivergenceGuard::PATIENCE - 1 {
            guard.check(s, 50.0, &g).unwrap();
        }
        assert!(matches!(
            guard.check(999, 50.0, &g),
            Err(Error::Diverged { step: 999, .. })
        ));
        assert!(matches!(
            DivergenceGuard::default().check(3, f64::NAN, &g),
            Err(Error::Diverged { step: 3, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            checkpoint_every: Some(1),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(TrainConfig::default().total_steps(), 5000);
    }

    #[test]
    fn checkpoints_at_cadence() {
        let dir = tempfile::tempdir().unwrap();
        let mut head = gaussian_head(12);
        let cfg = TrainConfig {
            samples_per_epoch: 400,
            checkpoint_every: Some(2),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..config(4, 1)
        };
        let report = train(&Conjugate, &mut head, &cfg).unwrap();
        assert_eq!(report.checkpoints.len(), 2);
        let ckpt = checkpoint::load(&report.checkpoints[1]).unwrap();
        let mut restored = gaussian_head(0);
        checkpoint::restore_into(&ckpt, &mut restored.graph).unwrap();
        assert_eq!(restored.graph.flat_values(), head.graph.flat_values());
    }

    struct Identity {
        noise: f64,
    }

    impl Decoder for Identity {
        fn decode<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
            Ok(z.iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(rng);
                    v + self.noise * e
                })
                .collect())
        }
    }

    /// Head that returns `x` with the smallest allowed spread.
    fn copy_head() -> MeanFieldGaussianHead {
        let mut g = ParamGraph::new();
        let mut rng = substream(0, "init");
        let net = Mlp::new(&mut g, "q", &[1, 2], Activation::Identity, &mut rng).unwrap();
        let layer = &net.layers()[0];
        g.value_mut(layer.weight).data_mut().copy_from_slice(&[1.0, 0.0]);
        g.value_mut(layer.bias).data_mut().copy_from_slice(&[0.0, -100.0]);
        MeanFieldGaussianHead::new(net, g).unwrap()
    }

    #[test]
    fn observable_error_floors() {
        let head = copy_head();
        let xs: Vec<Vec<f64>> = (0..5000).map(|i| vec![(i as f64 * 0.37).sin() * 3.0]).collect();
        let mut rng = substream(0, "eval");
        let exact = observable_reconstruction_error(&Identity { noise: 0.0 }, &head, &xs, &mut rng).unwrap();
        // Only the clamped spread σ = e⁻⁷ remains.
        assert!(exact < 2e-6, "{exact}");
        let noisy = observable_reconstruction_error(&Identity { noise: 0.5 }, &head, &xs, &mut rng).unwrap();
        assert!((noisy - 0.25).abs() < 0.02, "{noisy}");
        assert!(observable_reconstruction_error(&Identity { noise: 0.0 }, &head, &[], &mut rng).is_err());
    }

    /// `x = z` exactly.
    struct Copy;

    impl Simulator for Copy {
        type Sample = JointSample;
        fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
            let z: f64 = StandardNormal.sample(rng);
            Ok(JointSample::new(vec![z], vec![z]))
        }
    }

    #[test]
    fn perfect_head_has_zero_latent_error() {
        let mut rng = substream(0, "eval");
        let e = latent_reconstruction_error(&Copy, &copy_head(), 1000, &mut rng).unwrap();
        assert!(e < 2e-6, "{e}");
        assert!(latent_reconstruction_error(&Copy, &copy_head(), 0, &mut rng).is_err());
    }
}
