//! Conditional posterior heads `q(z | x)`.
//!
//! A head pairs a network (any [`Network`]) with an output family that turns the network
//! output into a normalized density: a mean-field Gaussian, a mixture of fixed Gaussian
//! kernels with learned weights, or a product of Bernoullis.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tape::{sigmoid, ParamGraph, Tape, Var};
use crate::tensor::Tensor;

/// `0.5 · ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
/// Smallest log-density a head reports; `exp(-745)` is the last subnormal `f64`.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

/// Anything that maps a `[batch, input_dim]` tape value to `[batch, output_dim]`.
pub trait Network {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> Result<Var>;
    fn descriptor(&self) -> String;
}

impl Network for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }
    fn forward(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> Result<Var> {
        Mlp::forward(self, tape, graph, x)
    }
    fn descriptor(&self) -> String {
        format!("mlp({})", Mlp::descriptor(self))
    }
}

/// A learned conditional density with tractable log-density and a sampler.
pub trait ConditionalDensity {
    fn latent_dim(&self) -> usize;
    fn condition_dim(&self) -> usize;
    fn graph(&self) -> &ParamGraph;
    fn graph_mut(&mut self) -> &mut ParamGraph;
    fn descriptor(&self) -> String;

    /// Records `log q(z_i | x_i)` for every row on `tape`; the result is `[batch, 1]`.
    fn log_prob_on(&self, tape: &mut Tape, condition: &Tensor, z: &Tensor) -> Result<Var>;

    /// One draw `z ~ q(· | x_i)` per condition row, as `[batch, latent_dim]`.
    fn sample<R: Rng + ?Sized>(&self, condition: &Tensor, rng: &mut R) -> Result<Tensor>;

    fn log_prob(&self, condition: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let lp = self.log_prob_on(&mut tape, condition, z)?;
        Ok(tape.value(lp).data().to_vec())
    }
}

fn check_batch(op: &'static str, condition: &Tensor, z: &Tensor, cdim: usize, zdim: usize) -> Result<()> {
    if condition.cols() != cdim {
        return Err(Error::shape(op, &[condition.rows(), cdim], condition.shape()));
    }
    if z.cols() != zdim || z.rows() != condition.rows() {
        return Err(Error::shape(op, &[condition.rows(), zdim], z.shape()));
    }
    Ok(())
}

/// Per-row diagonal Gaussian log-density `Σ_k log N(z_k; μ_k, exp(s_k)²)`, `[batch, 1]`.
///
/// `z` may itself depend on parameters (reparametrized samples).
pub fn gaussian_log_prob(tape: &mut Tape, mu: Var, log_sigma: Var, z: Var) -> Result<Var> {
    let diff = tape.sub(z, mu)?;
    let neg = tape.scale(log_sigma, -1.0)?;
    let inv_sigma = tape.exp(neg)?;
    let standardized = tape.mul(diff, inv_sigma)?;
    let sq = tape.square(standardized)?;
    let half = tape.scale(sq, -0.5)?;
    let per_coord = tape.sub(half, log_sigma)?;
    let per_coord = tape.add_scalar(per_coord, -HALF_LN_2PI)?;
    tape.sum_cols(per_coord)
}

/// `μ + σ ε` per coordinate; `σ = 0` returns `μ` exactly.
pub fn sample_gaussian<R: Rng + ?Sized>(mu: &[f64], sigma: &[f64], rng: &mut R) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let e: f64 = StandardNormal.sample(rng);
            m + s * e
        })
        .collect()
}

pub fn normal_log_pdf(z: f64, mean: f64, sd: f64) -> f64 {
    let u = (z - mean) / sd;
    -0.5 * u * u - sd.ln() - HALF_LN_2PI
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Fully factorized Gaussian head: the network emits `(μ, log σ)` for each latent coordinate.
#[derive(Clone, Debug)]
pub struct MeanFieldGaussianHead<N = Mlp> {
    pub net: N,
    pub graph: ParamGraph,
    dim: usize,
}

impl<N: Network> MeanFieldGaussianHead<N> {
    pub fn new(net: N, graph: ParamGraph) -> Result<Self> {
        let out = net.output_dim();
        if !out.is_multiple_of(2) || out == 0 {
            return Err(Error::InvalidArgument(format!(
                "mean-field head needs an even network output, got {out}"
            )));
        }
        Ok(Self {
            dim: out / 2,
            net,
            graph,
        })
    }

    /// `(μ, log σ)` tape values, each `[batch, dim]`; `log σ` is clamped to `[-7, 7]`.
    pub fn moments(&self, tape: &mut Tape, condition: Var) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, &self.graph, condition)?;
        let mu = tape.slice_cols(out, 0, self.dim)?;
        let raw = tape.slice_cols(out, self.dim, 2 * self.dim)?;
        let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, log_sigma))
    }

    /// Plain `(μ, σ)` rows for a batch of conditions.
    pub fn mean_sd(&self, condition: &Tensor) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let c = tape.constant(condition.clone())?;
        let (mu, ls) = self.moments(&mut tape, c)?;
        let rows = |t: &Tensor, f: fn(f64) -> f64| -> Vec<Vec<f64>> {
            (0..t.rows())
                .map(|i| t.row(i).iter().map(|&v| f(v)).collect())
                .collect()
        };
        Ok((rows(tape.value(mu), |v| v), rows(tape.value(ls), f64::exp)))
    }
}

impl<N: Network> ConditionalDensity for MeanFieldGaussianHead<N> {
    fn latent_dim(&self) -> usize {
        self.dim
    }
    fn condition_dim(&self) -> usize {
        self.net.input_dim()
    }
    fn graph(&self) -> &ParamGraph {
        &self.graph
    }
    fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }
    fn descriptor(&self) -> String {
        format!("mean_field_gaussian;dim={};net={}", self.dim, self.net.descriptor())
    }

    fn log_prob_on(&self, tape: &mut Tape, condition: &Tensor, z: &Tensor) -> Result<Var> {
        check_batch("mean_field_log_prob", condition, z, self.condition_dim(), self.dim)?;
        let c = tape.constant(condition.clone())?;
        let zv = tape.constant(z.clone())?;
        let (mu, ls) = self.moments(tape, c)?;
        gaussian_log_prob(tape, mu, ls, zv)
    }

    fn sample<R: Rng + ?Sized>(&self, condition: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (mu, sd) = self.mean_sd(condition)?;
        let rows: Vec<Vec<f64>> = mu.iter().zip(&sd).map(|(m, s)| sample_gaussian(m, s, rng)).collect();
        Tensor::from_rows(&rows)
    }
}

/// Fixed one-dimensional Gaussian kernels `(center, bandwidth)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrid {
    kernels: Vec<(f64, f64)>,
}

impl KernelGrid {
    pub fn new(kernels: Vec<(f64, f64)>) -> Result<Self> {
        if kernels.is_empty() || kernels.iter().any(|&(c, h)| !c.is_finite() || !(h > 0.0)) {
            return Err(Error::InvalidArgument(
                "kernels need finite centers and positive bandwidths".into(),
            ));
        }
        Ok(Self { kernels })
    }

    /// `centers` evenly spaced on `[lo, hi]`; each center gets one kernel per bandwidth
    /// multiplier, in units of the grid spacing.
    pub fn uniform(lo: f64, hi: f64, centers: usize, multipliers: &[f64]) -> Result<Self> {
        if centers < 2 || !(hi > lo) || multipliers.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "bad kernel grid [{lo}, {hi}] × {centers}"
            )));
        }
        let spacing = (hi - lo) / (centers - 1) as f64;
        let kernels = (0..centers)
            .flat_map(|i| {
                let c = lo + spacing * i as f64;
                multipliers.iter().map(move |&m| (c, m * spacing))
            })
            .collect();
        Self::new(kernels)
    }

    /// Default grid for a target observed on `[min, max]`: 64 centers over the range widened
    /// by 20% of its width on each side, bandwidths {0.5, 1.5} × spacing.
    pub fn for_range(min: f64, max: f64) -> Result<Self> {
        let pad = 0.2 * (max - min);
        Self::uniform(min - pad, max + pad, 64, &[0.5, 1.5])
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn kernels(&self) -> &[(f64, f64)] {
        &self.kernels
    }

    /// Interval guaranteed to hold all but a negligible tail of any mixture on the grid.
    pub fn support(&self, widths: f64) -> (f64, f64) {
        let hmax = self.kernels.iter().map(|k| k.1).fold(0.0, f64::max);
        let lo = self.kernels.iter().map(|k| k.0).fold(f64::INFINITY, f64::min);
        let hi = self.kernels.iter().map(|k| k.0).fold(f64::NEG_INFINITY, f64::max);
        (lo - widths * hmax, hi + widths * hmax)
    }

    /// Per-kernel log-densities at `z`.
    pub fn kernel_log_pdfs(&self, z: f64) -> Vec<f64> {
        self.kernels.iter().map(|&(c, h)| normal_log_pdf(z, c, h)).collect()
    }

    pub fn density(&self, weights: &[f64], z: f64) -> f64 {
        self.kernels
            .iter()
            .zip(weights)
            .map(|(&(c, h), &w)| w * normal_log_pdf(z, c, h).exp())
            .sum()
    }

    pub fn cdf(&self, weights: &[f64], z: f64) -> f64 {
        self.kernels
            .iter()
            .zip(weights)
            .map(|(&(c, h), &w)| w * normal_cdf((z - c) / h))
            .sum()
    }

    /// Mixture mass on `[a, b]`.
    pub fn interval_mass(&self, weights: &[f64], a: f64, b: f64) -> f64 {
        (self.cdf(weights, b) - self.cdf(weights, a)).clamp(0.0, 1.0)
    }

    pub fn mean(&self, weights: &[f64]) -> f64 {
        self.kernels.iter().zip(weights).map(|(k, w)| k.0 * w).sum()
    }

    pub fn variance(&self, weights: &[f64]) -> f64 {
        let m = self.mean(weights);
        self.kernels
            .iter()
            .zip(weights)
            .map(|(&(c, h), &w)| w * (h * h + (c - m) * (c - m)))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, weights: &[f64], rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.kernels.len() - 1;
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        let (c, h) = self.kernels[pick];
        let e: f64 = StandardNormal.sample(rng);
        c + h * e
    }

    /// Trapezoid-rule integral of the mixture density over [`Self::support`]`(6)`.
    pub fn quadrature(&self, weights: &[f64], step: f64) -> Result<f64> {
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "grid step must be positive, got {step}"
            )));
        }
        let (lo, hi) = self.support(6.0);
        let n = ((hi - lo) / step).ceil() as usize;
        let h = (hi - lo) / n as f64;
        let mut total = 0.5 * (self.density(weights, lo) + self.density(weights, hi));
        for i in 1..n {
            total += self.density(weights, lo + h * i as f64);
        }
        Ok(total * h)
    }

    pub fn descriptor(&self) -> String {
        let (lo, hi) = (self.kernels[0].0, self.kernels[self.kernels.len() - 1].0);
        format!("kernels={};range={lo}..{hi}", self.kernels.len())
    }
}

/// Kernel mixture head for a scalar latent: softmax weights over a frozen [`KernelGrid`].
#[derive(Clone, Debug)]
pub struct KernelMixtureHead<N = Mlp> {
    pub net: N,
    pub graph: ParamGraph,
    pub grid: KernelGrid,
}

impl<N: Network> KernelMixtureHead<N> {
    pub fn new(net: N, graph: ParamGraph, grid: KernelGrid) -> Result<Self> {
        if net.output_dim() != grid.len() {
            return Err(Error::shape("kernel_mixture_head", &[grid.len()], &[net.output_dim()]));
        }
        Ok(Self { net, graph, grid })
    }

    /// Mixture weights, one row per condition row.
    pub fn weights(&self, condition: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let c = tape.constant(condition.clone())?;
        let logits = self.net.forward(&mut tape, &self.graph, c)?;
        let w = tape.softmax(logits)?;
        let t = tape.value(w);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn density_quadrature(&self, condition: &Tensor, grid_step: f64) -> Result<f64> {
        let w = self.weights(condition)?;
        self.grid.quadrature(&w[0], grid_step)
    }
}

/// Records the mixture log-density for scalar targets given per-row weight logits.
pub fn kernel_mixture_log_prob(tape: &mut Tape, grid: &KernelGrid, logits: Var, z: &[f64]) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if z.len() != rows || tape.value(logits).cols() != grid.len() {
        return Err(Error::shape(
            "kernel_mixture_log_prob",
            &[rows, grid.len()],
            tape.value(logits).shape(),
        ));
    }
    let table: Vec<f64> = z.iter().flat_map(|&zi| grid.kernel_log_pdfs(zi)).collect();
    let kernel_lp = tape.constant(Tensor::new(&[rows, grid.len()], table)?)?;
    let log_w = tape.log_softmax(logits)?;
    let joint = tape.add(log_w, kernel_lp)?;
    let lp = tape.log_sum_exp(joint)?;
    tape.clamp(lp, LOG_DENSITY_FLOOR, f64::INFINITY)
}

impl<N: Network> ConditionalDensity for KernelMixtureHead<N> {
    fn latent_dim(&self) -> usize {
        1
    }
    fn condition_dim(&self) -> usize {
        self.net.input_dim()
    }
    fn graph(&self) -> &ParamGraph {
        &self.graph
    }
    fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }
    fn descriptor(&self) -> String {
        format!(
            "kernel_mixture;{};net={}",
            self.grid.descriptor(),
            self.net.descriptor()
        )
    }

    fn log_prob_on(&self, tape: &mut Tape, condition: &Tensor, z: &Tensor) -> Result<Var> {
        check_batch("kernel_mixture_log_prob", condition, z, self.condition_dim(), 1)?;
        let c = tape.constant(condition.clone())?;
        let logits = self.net.forward(tape, &self.graph, c)?;
        kernel_mixture_log_prob(tape, &self.grid, logits, z.data())
    }

    fn sample<R: Rng + ?Sized>(&self, condition: &Tensor, rng: &mut R) -> Result<Tensor> {
        let w = self.weights(condition)?;
        let draws: Vec<f64> = w.iter().map(|wi| self.grid.sample(wi, rng)).collect();
        Tensor::new(&[draws.len(), 1], draws)
    }
}

/// Product of independent Bernoullis; the network emits one logit per coordinate.
#[derive(Clone, Debug)]
pub struct BernoulliHead<N = Mlp> {
    pub net: N,
    pub graph: ParamGraph,
}

impl<N: Network> BernoulliHead<N> {
    pub fn new(net: N, graph: ParamGraph) -> Self {
        Self { net, graph }
    }

    /// `q(z_k = 1 | x)` per row and coordinate.
    pub fn probabilities(&self, condition: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let c = tape.constant(condition.clone())?;
        let logits = self.net.forward(&mut tape, &self.graph, c)?;
        let t = tape.value(logits);
        Ok((0..t.rows())
            .map(|i| t.row(i).iter().map(|&l| sigmoid(l)).collect())
            .collect())
    }
}

/// `Σ_k [z_k θ_k − softplus(θ_k)]` per row, i.e. `log σ(θ)` for ones and `log σ(−θ)` for zeros.
pub fn bernoulli_log_prob(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    if labels.len() != tape.value(logits).len() {
        return Err(Error::shape(
            "bernoulli_log_prob",
            tape.value(logits).shape(),
            labels.shape(),
        ));
    }
    let shape = tape.value(logits).shape().to_vec();
    let y = tape.constant(labels.clone().reshape(&shape)?)?;
    let yl = tape.mul(logits, y)?;
    let sp = tape.softplus(logits)?;
    let per = tape.sub(yl, sp)?;
    tape.sum_cols(per)
}

impl<N: Network> ConditionalDensity for BernoulliHead<N> {
    fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }
    fn condition_dim(&self) -> usize {
        self.net.input_dim()
    }
    fn graph(&self) -> &ParamGraph {
        &self.graph
    }
    fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }
    fn descriptor(&self) -> String {
        format!("bernoulli;dim={};net={}", self.latent_dim(), self.net.descriptor())
    }

    fn log_prob_on(&self, tape: &mut Tape, condition: &Tensor, z: &Tensor) -> Result<Var> {
        check_batch(
            "bernoulli_log_prob",
            condition,
            z,
            self.condition_dim(),
            self.latent_dim(),
        )?;
        let c = tape.constant(condition.clone())?;
        let logits = self.net.forward(tape, &self.graph, c)?;
        bernoulli_log_prob(tape, logits, z)
    }

    fn sample<R: Rng + ?Sized>(&self, condition: &Tensor, rng: &mut R) -> Result<Tensor> {
        let p = self.probabilities(condition)?;
        let rows: Vec<Vec<f64>> = p
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&pk| if rng.random::<f64>() < pk { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Kolmogorov–Smirnov distance between samples and a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
