//! End-to-end studies on the exact oracles and the synthetic decoder.

use std::path::Path;

use rand::Rng;

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::families::{BernoulliHead, MeanFieldGaussianHead};
use crate::favi::{self, latent_errors_on, observable_reconstruction_errors, Simulator, TrainConfig};
use crate::nn::{Activation, Mlp};
use crate::oracles::{
    gaussian_tv, max_tv, tabular_fit, theorem1_report, DiscreteJoint, LinearGaussianModel, MarginalRow,
};
use crate::reverse_kl::{reverse_train, Resampler};
use crate::rng::substream;
use crate::stats::{self, Interval};
use crate::synthetic::{SyntheticDecoder, LATENT_DIM, OBSERVED_DIM};
use crate::tape::ParamGraph;
use crate::tensor::Tensor;

/// Training schedule shared by the oracle studies: 100 epochs of 10⁴ draws in batches of 200.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        adam: AdamConfig {
            step_size: 3e-3,
            ..AdamConfig::default()
        },
        final_lr_fraction: 0.02,
        seed,
        ..TrainConfig::default()
    }
}

fn gaussian_head(sizes: &[usize], act: Activation, seed: u64) -> Result<MeanFieldGaussianHead> {
    let mut g = ParamGraph::new();
    let mut rng = substream(seed, "init");
    let net = Mlp::new(&mut g, "q", sizes, act, &mut rng)?;
    MeanFieldGaussianHead::new(net, g)
}

#[derive(Clone, Debug)]
pub struct Theorem1Config {
    pub joints: usize,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Theorem1Config {
    pub fn new(seed: u64) -> Self {
        Self {
            joints: 10,
            hidden: 16,
            train: default_train_config(seed),
        }
    }
}

/// Exact versus fitted marginals on one joint of the corpus.
#[derive(Clone, Debug)]
pub struct JointReport {
    pub name: String,
    pub z_bits: usize,
    pub n_x: usize,
    pub n_xi: usize,
    pub tabular: Vec<MarginalRow>,
    pub neural: Vec<MarginalRow>,
}

impl JointReport {
    pub fn tabular_tv(&self) -> f64 {
        max_tv(&self.tabular)
    }
    pub fn neural_tv(&self) -> f64 {
        max_tv(&self.neural)
    }
}

/// Corpus of random joints (1–3 latent bits, 2–4 observation values, every other one with a
/// nuisance variable) followed by the noisy XOR joint.
pub fn theorem1_corpus(count: usize, seed: u64) -> Result<Vec<(String, DiscreteJoint)>> {
    let mut rng = substream(seed, "tables");
    let mut corpus = Vec::with_capacity(count + 1);
    for i in 0..count {
        let bits = 1 + i % 3;
        let n_x = 2 + (i / 3) % 3;
        let n_xi = 1 + i % 2;
        corpus.push((format!("random_{i}"), DiscreteJoint::random(bits, n_xi, n_x, &mut rng)?));
    }
    corpus.push(("xor".to_string(), DiscreteJoint::xor(0.1)));
    Ok(corpus)
}

/// Fits factorized tables exactly and trains a factorized Bernoulli network by FAVI on each
/// joint; both are compared with the enumerated marginals.
pub fn theorem1_suite(config: &Theorem1Config) -> Result<Vec<JointReport>> {
    let mut reports = Vec::new();
    for (i, (name, joint)) in theorem1_corpus(config.joints, config.train.seed)?
        .into_iter()
        .enumerate()
    {
        let tabular = theorem1_report(&joint, &tabular_fit(&joint)?)?;
        let mut g = ParamGraph::new();
        let mut rng = substream(config.train.seed.wrapping_add(i as u64), "init");
        let net = Mlp::new(
            &mut g,
            "q",
            &[joint.n_x(), config.hidden, joint.z_bits()],
            Activation::Tanh,
            &mut rng,
        )?;
        let mut head = BernoulliHead::new(net, g);
        let train = TrainConfig {
            seed: config.train.seed.wrapping_add(i as u64),
            ..config.train.clone()
        };
        favi::train(&joint, &mut head, &train)?;
        let eye: Vec<Vec<f64>> = (0..joint.n_x())
            .map(|x| (0..joint.n_x()).map(|j| if j == x { 1.0 } else { 0.0 }).collect())
            .collect();
        let probs = head.probabilities(&Tensor::from_rows(&eye)?)?;
        let neural = theorem1_report(&joint, &probs)?;
        reports.push(JointReport {
            name,
            z_bits: joint.z_bits(),
            n_x: joint.n_x(),
            n_xi: joint.n_xi(),
            tabular,
            neural,
        });
    }
    Ok(reports)
}

pub fn write_theorem1_csv(path: &Path, reports: &[JointReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["joint", "method", "x", "coord", "exact", "fitted", "tv"])?;
    for r in reports {
        for (method, rows) in [("tabular", &r.tabular), ("neural", &r.neural)] {
            for row in rows {
                w.write_record([
                    r.name.clone(),
                    method.to_string(),
                    row.x.to_string(),
                    row.coord.to_string(),
                    format!("{:.12e}", row.exact),
                    format!("{:.12e}", row.fitted),
                    format!("{:.12e}", row.tv),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One evaluation point of the marginalization study.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalizationRow {
    pub x: f64,
    pub exact_mean: f64,
    pub exact_sd: f64,
    /// Head trained on `(z, ξ, x)` draws with `ξ` ignored.
    pub ignoring_mean: f64,
    pub ignoring_sd: f64,
    /// Head trained on a simulator that never produces `ξ`.
    pub marginal_mean: f64,
    pub marginal_sd: f64,
    pub tv_between: f64,
    pub tv_to_exact: f64,
}

#[derive(Clone, Debug)]
pub struct Theorem2Config {
    pub train: TrainConfig,
    /// Evaluation grid over `x`.
    pub grid: Vec<f64>,
}

impl Theorem2Config {
    pub fn new(seed: u64) -> Self {
        Self {
            train: TrainConfig {
                batch_size: 1000,
                epochs: 1000,
                ..default_train_config(seed)
            },
            grid: (0..=24).map(|i| -3.0 + 0.25 * i as f64).collect(),
        }
    }
}

/// Chain `z → ξ → x`: a head trained ignoring `ξ` versus one trained on the explicitly
/// marginalized simulator, both against the analytic `p(z | x)`.
pub fn theorem2_suite(config: &Theorem2Config) -> Result<Vec<MarginalizationRow>> {
    let chain = LinearGaussianModel::chain();
    let marginal = chain.marginalized()?;
    let sizes = [1, 32, 32, 2];
    let mut ignoring = gaussian_head(&sizes, Activation::Tanh, config.train.seed)?;
    favi::train(&chain, &mut ignoring, &config.train)?;
    let mut direct = gaussian_head(&sizes, Activation::Tanh, config.train.seed)?;
    favi::train(&marginal, &mut direct, &config.train)?;
    let xs = Tensor::new(&[config.grid.len(), 1], config.grid.clone())?;
    let (m1, s1) = ignoring.mean_sd(&xs)?;
    let (m2, s2) = direct.mean_sd(&xs)?;
    config
        .grid
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let exact = chain.latent_posterior(&[x])?;
            let (em, es) = (exact.mean[0], exact.sd(0));
            Ok(MarginalizationRow {
                x,
                exact_mean: em,
                exact_sd: es,
                ignoring_mean: m1[i][0],
                ignoring_sd: s1[i][0],
                marginal_mean: m2[i][0],
                marginal_sd: s2[i][0],
                tv_between: gaussian_tv(m1[i][0], s1[i][0], m2[i][0], s2[i][0]),
                tv_to_exact: gaussian_tv(m1[i][0], s1[i][0], em, es),
            })
        })
        .collect()
}

pub fn write_theorem2_csv(path: &Path, rows: &[MarginalizationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "x",
        "exact_mean",
        "exact_sd",
        "ignoring_mean",
        "ignoring_sd",
        "marginal_mean",
        "marginal_sd",
        "tv_between",
        "tv_to_exact",
    ])?;
    for r in rows {
        w.write_record(
            [
                r.x,
                r.exact_mean,
                r.exact_sd,
                r.ignoring_mean,
                r.ignoring_sd,
                r.marginal_mean,
                r.marginal_sd,
                r.tv_between,
                r.tv_to_exact,
            ]
            .map(|v| format!("{v:.12e}")),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Per-coordinate posterior spread of mean-field heads on a correlated Gaussian target.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastReport {
    pub rho: f64,
    pub reverse_kl_sd: Vec<f64>,
    pub favi_sd: Vec<f64>,
    pub reverse_kl_fixed_point_sd: Vec<f64>,
    pub true_marginal_sd: Vec<f64>,
}

impl ContrastReport {
    pub fn min_ratio(&self) -> f64 {
        self.favi_sd
            .iter()
            .zip(&self.reverse_kl_sd)
            .map(|(f, r)| f / r)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct ContrastConfig {
    pub rho: f64,
    pub data_points: usize,
    pub eval_points: usize,
    pub train: TrainConfig,
}

impl ContrastConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            rho: 0.9,
            data_points: 10_000,
            eval_points: 1000,
            train: default_train_config(seed),
        }
    }
}

/// Trains a reverse-KL and a FAVI mean-field head on the same target and reports the
/// average predicted standard deviation per coordinate over draws of `x`.
pub fn mean_field_contrast(config: &ContrastConfig) -> Result<ContrastReport> {
    let target = LinearGaussianModel::correlated_pair(config.rho)?;
    let seed = config.train.seed;
    let data = Resampler::from_simulator(&target, config.data_points, &mut substream(seed, "dataset"))?;
    let sizes = [2, 32, 32, 4];
    let mut reverse = gaussian_head(&sizes, Activation::Tanh, seed)?;
    reverse_train(&target, &mut reverse, &data, &config.train)?;
    let mut forward = gaussian_head(&sizes, Activation::Tanh, seed)?;
    favi::train(&target, &mut forward, &config.train)?;

    let eval = Resampler::from_simulator(&target, config.eval_points, &mut substream(seed, "eval"))?;
    let xs = Tensor::from_rows(eval.data())?;
    let avg_sd = |head: &MeanFieldGaussianHead| -> Result<Vec<f64>> {
        let (_, sd) = head.mean_sd(&xs)?;
        Ok((0..2)
            .map(|k| stats::mean(&sd.iter().map(|r| r[k]).collect::<Vec<_>>()))
            .collect())
    };
    let post = target.gaussian_posterior(&[0.0, 0.0])?;
    Ok(ContrastReport {
        rho: config.rho,
        reverse_kl_sd: avg_sd(&reverse)?,
        favi_sd: avg_sd(&forward)?,
        reverse_kl_fixed_point_sd: crate::oracles::mean_field_reverse_kl_gaussian(&post.cov)?
            .iter()
            .map(|v| v.sqrt())
            .collect(),
        true_marginal_sd: (0..2).map(|k| post.sd(k)).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct CompareConfig {
    pub data_points: usize,
    pub eval_draws: usize,
    pub bootstrap_reps: usize,
    pub hidden: usize,
    pub train: TrainConfig,
}

impl CompareConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            data_points: 10_000,
            eval_draws: 500,
            bootstrap_reps: 10_000,
            hidden: 64,
            train: TrainConfig {
                adam: AdamConfig::default(),
                final_lr_fraction: 0.1,
                ..default_train_config(seed)
            },
        }
    }
}

/// Reconstruction errors of both inference methods on the synthetic decoder.
#[derive(Clone, Debug)]
pub struct CompareReport {
    pub favi_latent: Vec<f64>,
    pub reverse_latent: Vec<f64>,
    pub favi_observable: Vec<f64>,
    pub reverse_observable: Vec<f64>,
    /// Paired bootstrap of `mean(reverse − favi)` for the latent error.
    pub latent_gap: Interval,
    pub observable_gap: Interval,
}

fn paired_gap<R: Rng + ?Sized>(favi: &[f64], reverse: &[f64], reps: usize, rng: &mut R) -> Result<Interval> {
    let d: Vec<f64> = reverse.iter().zip(favi).map(|(r, f)| r - f).collect();
    stats::bootstrap(&d, stats::mean, reps, 0.95, rng)
}

/// Trains both methods with the same architecture and schedule: FAVI on fresh simulator
/// draws, reverse KL on a fixed set of observations resampled uniformly.
pub fn compare_vi(config: &CompareConfig) -> Result<CompareReport> {
    if config.eval_draws == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one draw".into()));
    }
    let decoder = SyntheticDecoder::new();
    let seed = config.train.seed;
    let data = Resampler::from_simulator(&decoder, config.data_points, &mut substream(seed, "dataset"))?;
    let sizes = [OBSERVED_DIM, config.hidden, config.hidden, 2 * LATENT_DIM];
    let mut forward = gaussian_head(&sizes, Activation::Relu, seed)?;
    favi::train(&decoder, &mut forward, &config.train)?;
    let mut reverse = gaussian_head(&sizes, Activation::Relu, seed)?;
    reverse_train(&decoder, &mut reverse, &data, &config.train)?;

    let mut eval = substream(seed, "eval");
    let draws = decoder.draw_batch(config.eval_draws, &mut eval)?;
    let favi_latent = latent_errors_on(&draws, &forward, &mut eval)?;
    let reverse_latent = latent_errors_on(&draws, &reverse, &mut eval)?;
    let held_out: Vec<Vec<f64>> = decoder
        .draw_batch(config.eval_draws, &mut eval)?
        .into_iter()
        .map(|s| s.x)
        .collect();
    let favi_observable = observable_reconstruction_errors(&decoder, &forward, &held_out, &mut eval)?;
    let reverse_observable = observable_reconstruction_errors(&decoder, &reverse, &held_out, &mut eval)?;
    let mut boot = substream(seed, "bootstrap");
    Ok(CompareReport {
        latent_gap: paired_gap(&favi_latent, &reverse_latent, config.bootstrap_reps, &mut boot)?,
        observable_gap: paired_gap(&favi_observable, &reverse_observable, config.bootstrap_reps, &mut boot)?,
        favi_latent,
        reverse_latent,
        favi_observable,
        reverse_observable,
    })
}

pub fn write_compare_csv(path: &Path, report: &CompareReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "draw",
        "favi_latent",
        "reverse_latent",
        "favi_observable",
        "reverse_observable",
    ])?;
    for i in 0..report.favi_latent.len() {
        w.write_record([
            i.to_string(),
            format!("{:.12e}", report.favi_latent[i]),
            format!("{:.12e}", report.reverse_latent[i]),
            format!("{:.12e}", report.favi_observable[i]),
            format!("{:.12e}", report.reverse_observable[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
