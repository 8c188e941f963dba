//! FAVI training of the meta-classifier on simulated task instances.

use std::sync::Arc;

use favi_core::favi::{train, Simulator, TrainConfig, TrainReport};
use rand::Rng;

use crate::encoder::{EncoderConfig, MetaClassifier};
use crate::error::{MetaError, Result};
use crate::task::{sample_instance, sample_task, EnsembleConfig, FiniteEnsemble, TaskInstance};

/// Draws a task (from the finite ensemble if given, else fresh from the family), then an
/// instance whose training-set size is uniform on `n_range`.
#[derive(Clone, Debug)]
pub struct TaskSimulator {
    pub family: EnsembleConfig,
    pub ensemble: Option<Arc<FiniteEnsemble>>,
    /// Inclusive range of training-set sizes.
    pub n_range: (usize, usize),
}

impl TaskSimulator {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.n_range.0 > self.n_range.1 || self.n_range.1 > 64 {
            return Err(MetaError::InvalidConfig(format!(
                "training-set sizes {:?} must lie in [0, 64]",
                self.n_range
            )));
        }
        Ok(())
    }
}

impl Simulator for TaskSimulator {
    type Sample = TaskInstance;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> favi_core::Result<TaskInstance> {
        let n = rng.random_range(self.n_range.0..=self.n_range.1);
        let model = match &self.ensemble {
            Some(e) => Arc::clone(e.draw_model(rng)),
            None => Arc::new(
                sample_task(&self.family, 0, rng).map_err(|e| favi_core::Error::InvalidArgument(e.to_string()))?,
            ),
        };
        Ok(sample_instance(&model, n, rng))
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
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

pub fn train_metaclassifier(sim: &TaskSimulator, config: &MetaTrainConfig) -> Result<(MetaClassifier, TrainReport)> {
    sim.validate()?;
    let mut model = MetaClassifier::new(config.encoder.clone(), config.train.seed)?;
    let report = train(sim, &mut model, &config.train)?;
    Ok((model, report))
}
