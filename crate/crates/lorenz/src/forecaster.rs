//! FAVI forecaster: observation window → kernel mixture over `x₁(t*)`.
//!
//! The network is a dilated causal convolution stack (kernel 2, dilations 1, 2, …, 32) read
//! out at the last time step. Only the outputs feeding that step matter, so the stack is
//! evaluated as a binary tree: each level pairs adjacent positions `(earlier, later)` and
//! applies the same dense map a kernel-2 convolution tap pair would.

use std::path::Path;

use favi_core::checkpoint;
use favi_core::families::{ConditionalDensity, KernelGrid, KernelMixtureHead, Network};
use favi_core::favi::{train, FaviModel, Simulator, TrainConfig, TrainReport};
use favi_core::nn::Dense;
use favi_core::rng::substream;
use favi_core::{ParamGraph, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{LorenzError, Result};
use crate::record::{RecordConfig, RecordSimulator, TrajectoryRecord};

/// Kernel-2 dilated convolution stack evaluated at its final position.
#[derive(Clone, Debug)]
pub struct TreeTcn {
    window: usize,
    channels: usize,
    /// One per level; level 0 reads raw scalars.
    levels: Vec<Dense>,
    readout: Dense,
}

impl TreeTcn {
    /// `window` must be a power of two (at least 2); depth is `log₂ window`.
    pub fn new<R: Rng + ?Sized>(
        graph: &mut ParamGraph,
        window: usize,
        channels: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if window < 2 || !window.is_power_of_two() || channels == 0 || outputs == 0 {
            return Err(LorenzError::InvalidConfig(format!(
                "tree convolution needs a power-of-two window ≥ 2, got {window}"
            )));
        }
        let depth = window.trailing_zeros() as usize;
        let mut levels = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 { 2 } else { 2 * channels };
            let level = Dense::new(graph, &format!("tcn.level{l}"), fan_in, channels, rng)?;
            // He-uniform: keeps activation scale constant through the ReLU levels.
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("positive limit");
            for w in graph.value_mut(level.weight).data_mut() {
                *w = dist.sample(rng);
            }
            levels.push(level);
        }
        let readout = Dense::new(graph, "tcn.readout", channels, outputs, rng)?;
        Ok(Self {
            window,
            channels,
            levels,
            readout,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> &[Dense] {
        &self.levels
    }

    pub fn readout(&self) -> &Dense {
        &self.readout
    }
}

impl Network for TreeTcn {
    fn input_dim(&self) -> usize {
        self.window
    }

    fn output_dim(&self) -> usize {
        self.readout.fan_out
    }

    fn forward(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> favi_core::Result<Var> {
        let batch = tape.value(x).rows();
        let mut rows = batch * self.window / 2;
        let mut h = tape.reshape(x, &[rows, 2])?;
        for (l, level) in self.levels.iter().enumerate() {
            if l > 0 {
                rows /= 2;
                h = tape.reshape(h, &[rows, 2 * self.channels])?;
            }
            h = level.forward(tape, graph, h)?;
            h = tape.relu(h)?;
        }
        self.readout.forward(tape, graph, h)
    }

    fn descriptor(&self) -> String {
        format!(
            "tree_tcn:window={},channels={},outputs={}",
            self.window,
            self.channels,
            self.output_dim()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecasterConfig {
    pub record: RecordConfig,
    pub channels: usize,
    /// Observations are multiplied by this before entering the network.
    pub input_scale: f64,
    /// Records drawn to set the kernel grid from the empirical target range.
    pub grid_pilot: usize,
    pub train: TrainConfig,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            record: RecordConfig::default(),
            channels: 32,
            input_scale: 0.1,
            grid_pilot: 2000,
            train: TrainConfig {
                batch_size: 100,
                epochs: 100,
                samples_per_epoch: 10_000,
                final_lr_fraction: 0.05,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Forecaster {
    pub head: KernelMixtureHead<TreeTcn>,
    pub input_scale: f64,
    grid_lo: f64,
    grid_hi: f64,
}

const GRID_CENTERS: usize = 64;
const GRID_MULTIPLIERS: [f64; 2] = [0.5, 1.5];

impl Forecaster {
    pub fn new(
        window: usize,
        channels: usize,
        input_scale: f64,
        grid_lo: f64,
        grid_hi: f64,
        seed: u64,
    ) -> Result<Self> {
        let grid = KernelGrid::uniform(grid_lo, grid_hi, GRID_CENTERS, &GRID_MULTIPLIERS)?;
        let mut graph = ParamGraph::new();
        let net = TreeTcn::new(&mut graph, window, channels, grid.len(), &mut substream(seed, "init"))?;
        Ok(Self {
            head: KernelMixtureHead::new(net, graph, grid)?,
            input_scale,
            grid_lo,
            grid_hi,
        })
    }

    /// Grid over the target range of `config.grid_pilot` simulated records, widened by 20% per side.
    pub fn for_config(config: &ForecasterConfig, seed: u64) -> Result<Self> {
        let sim = RecordSimulator {
            config: config.record.clone(),
        };
        let pilot = sim.draw_batch(config.grid_pilot.max(2), &mut substream(seed, "grid"))?;
        let lo = pilot.iter().map(|r| r.target).fold(f64::INFINITY, f64::min);
        let hi = pilot.iter().map(|r| r.target).fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.2 * (hi - lo);
        Self::new(
            config.record.n_obs,
            config.channels,
            config.input_scale,
            lo - pad,
            hi + pad,
            seed,
        )
    }

    pub fn grid(&self) -> &KernelGrid {
        &self.head.grid
    }

    pub fn window(&self) -> usize {
        self.head.net.window()
    }

    fn condition(&self, observations: &[&[f64]]) -> Result<Tensor> {
        if let Some(bad) = observations.iter().find(|o| o.len() != self.window()) {
            return Err(LorenzError::InvalidConfig(format!(
                "forecaster expects {} observations, got {}",
                self.window(),
                bad.len()
            )));
        }
        let data = observations
            .iter()
            .flat_map(|o| o.iter().map(|v| v * self.input_scale))
            .collect();
        Ok(Tensor::new(&[observations.len(), self.window()], data)?)
    }

    /// Mixture weights for each observation window.
    pub fn weights(&self, observations: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.head.weights(&self.condition(observations)?)?)
    }

    pub fn predictive(&self, observations: &[f64]) -> Result<Predictive<'_>> {
        Ok(Predictive {
            grid: self.grid(),
            weights: self.weights(&[observations])?.remove(0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(
            path,
            &FaviModel::<TrajectoryRecord>::descriptor(self),
            &self.head.graph,
        )?)
    }

    /// Rebuilds a forecaster from a checkpoint written by [`Forecaster::save`].
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(LorenzError::CheckpointMissing(path.display().to_string()));
        }
        let ckpt = checkpoint::load(path)?;
        let fields: std::collections::HashMap<&str, &str> =
            ckpt.descriptor.split(';').filter_map(|kv| kv.split_once('=')).collect();
        let get = |k: &str| -> Result<f64> {
            fields.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| {
                LorenzError::InvalidConfig(format!("checkpoint descriptor lacks {k}: {}", ckpt.descriptor))
            })
        };
        let mut f = Self::new(
            get("window")? as usize,
            get("channels")? as usize,
            get("input_scale")?,
            get("grid_lo")?,
            get("grid_hi")?,
            0,
        )?;
        checkpoint::restore_into(&ckpt, &mut f.head.graph)?;
        Ok(f)
    }
}

impl FaviModel<TrajectoryRecord> for Forecaster {
    fn graph(&self) -> &ParamGraph {
        &self.head.graph
    }

    fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.head.graph
    }

    fn descriptor(&self) -> String {
        format!(
            "lorenz_forecaster;window={};channels={};input_scale={};grid_lo={};grid_hi={}",
            self.window(),
            self.head.net.channels(),
            self.input_scale,
            self.grid_lo,
            self.grid_hi
        )
    }

    /// Only the observation window and the target enter; hidden coordinates never do.
    fn batch_log_q(&self, tape: &mut Tape, batch: &[TrajectoryRecord]) -> favi_core::Result<Var> {
        let obs: Vec<&[f64]> = batch.iter().map(|r| r.observations.as_slice()).collect();
        let condition = self
            .condition(&obs)
            .map_err(|e| favi_core::Error::InvalidArgument(e.to_string()))?;
        let z = Tensor::new(&[batch.len(), 1], batch.iter().map(|r| r.target).collect())?;
        self.head.log_prob_on(tape, &condition, &z)
    }
}

/// Forecast density for one record.
#[derive(Clone, Debug)]
pub struct Predictive<'a> {
    pub grid: &'a KernelGrid,
    pub weights: Vec<f64>,
}

impl Predictive<'_> {
    pub fn density(&self, z: f64) -> f64 {
        self.grid.density(&self.weights, z)
    }

    pub fn mean(&self) -> f64 {
        self.grid.mean(&self.weights)
    }

    pub fn sd(&self) -> f64 {
        self.grid.variance(&self.weights).sqrt()
    }

    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.grid.interval_mass(&self.weights, lo, hi)
    }

    /// `(z, density)` on `points` evenly spaced points of the grid support.
    pub fn tabulate(&self, points: usize) -> Vec<(f64, f64)> {
        let (lo, hi) = self.grid.support(3.0);
        let n = points.max(2);
        (0..n)
            .map(|i| {
                let z = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                (z, self.density(z))
            })
            .collect()
    }
}

/// Trains a fresh forecaster on records simulated under `config.record`.
pub fn train_forecaster(config: &ForecasterConfig) -> Result<(Forecaster, TrainReport)> {
    let mut model = Forecaster::for_config(config, config.train.seed)?;
    let sim = RecordSimulator {
        config: config.record.clone(),
    };
    let report = train(&sim, &mut model, &config.train)?;
    Ok((model, report))
}
