//! Adam optimizer.

use crate::error::{Error, Result};
use crate::tape::ParamGraph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(graph: &ParamGraph, config: AdamConfig) -> Self {
        let zeros = |g: &ParamGraph| g.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            config,
            first: zeros(graph),
            second: zeros(graph),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `graph`, then clears them.
    pub fn step(&mut self, graph: &mut ParamGraph) -> Result<()> {
        let grads = graph.grads().ok_or(Error::GradientsMissing)?.to_vec();
        if grads.len() != self.first.len() {
            return Err(Error::shape("adam", &[self.first.len()], &[grads.len()]));
        }
        for (id, g) in graph.ids().zip(&grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(graph.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = graph.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = graph.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= step_size * m_hat / (v_hat.sqrt() + eps);
            }
        }
        graph.clear_grads();
        Ok(())
    }
}
