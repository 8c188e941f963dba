//! A fixed nonlinear generator shared by forward and reverse-KL inference.
//!
//! `z ~ N(0, I₄)`, `h = tanh(W₁ z + b₁)`, `x ~ N(W_μ h + b_μ, diag(exp(2 (c + ½ (W_σ h + b_σ)))))`
//! with 32 observed features. Weights come from [`DECODER_SEED`] and never change.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::families::gaussian_log_prob;
use crate::favi::{Decoder, JointSample, Simulator};
use crate::nn::{Activation, Mlp};
use crate::reverse_kl::TractableJoint;
use crate::rng::substream;
use crate::tape::{ParamGraph, Tape, Var};
use crate::tensor::Tensor;

pub const DECODER_SEED: u64 = 0x5EED_0DEC;
pub const LATENT_DIM: usize = 4;
pub const OBSERVED_DIM: usize = 32;
const HIDDEN: usize = 32;
/// Input-layer gain so that the tanh units saturate over the prior's range.
const INPUT_GAIN: f64 = 2.5;
const LOG_NOISE_OFFSET: f64 = -1.0;
const LOG_NOISE_SLOPE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct SyntheticDecoder {
    net: Mlp,
    graph: ParamGraph,
}

impl Default for SyntheticDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticDecoder {
    pub fn new() -> Self {
        let mut graph = ParamGraph::new();
        let mut rng = substream(DECODER_SEED, "decoder");
        let net = Mlp::new(
            &mut graph,
            "decoder",
            &[LATENT_DIM, HIDDEN, 2 * OBSERVED_DIM],
            Activation::Tanh,
            &mut rng,
        )
        .expect("fixed sizes");
        let first = net.layers()[0].weight;
        for w in graph.value_mut(first).data_mut() {
            *w *= INPUT_GAIN;
        }
        let bias = net.layers()[0].bias;
        let offsets: Vec<f64> = (0..HIDDEN).map(|_| StandardNormal.sample(&mut rng)).collect();
        graph.value_mut(bias).data_mut().copy_from_slice(&offsets);
        Self { net, graph }
    }

    /// `(μ, log σ)` tape values for latent rows `z`, each `[batch, 32]`.
    fn moments_on(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
        let out = self.net.forward_frozen(tape, &self.graph, z)?;
        let mu = tape.slice_cols(out, 0, OBSERVED_DIM)?;
        let raw = tape.slice_cols(out, OBSERVED_DIM, 2 * OBSERVED_DIM)?;
        let scaled = tape.scale(raw, LOG_NOISE_SLOPE)?;
        let log_sigma = tape.add_scalar(scaled, LOG_NOISE_OFFSET)?;
        Ok((mu, log_sigma))
    }

    /// Mean and noise scale of `p(x | z)`.
    pub fn moments(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != LATENT_DIM {
            return Err(Error::shape("synthetic_decoder", &[LATENT_DIM], &[z.len()]));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(&[1, LATENT_DIM], z.to_vec())?)?;
        let (mu, ls) = self.moments_on(&mut tape, zv)?;
        Ok((
            tape.value(mu).data().to_vec(),
            tape.value(ls).data().iter().map(|v| v.exp()).collect(),
        ))
    }
}

impl Decoder for SyntheticDecoder {
    fn decode<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let (mu, sigma) = self.moments(z)?;
        Ok(mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| {
                let e: f64 = StandardNormal.sample(rng);
                m + s * e
            })
            .collect())
    }
}

impl Simulator for SyntheticDecoder {
    type Sample = JointSample;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
        let z: Vec<f64> = (0..LATENT_DIM).map(|_| StandardNormal.sample(rng)).collect();
        let x = self.decode(&z, rng)?;
        Ok(JointSample::new(z, x))
    }
}

impl TractableJoint for SyntheticDecoder {
    fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    fn observation_dim(&self) -> usize {
        OBSERVED_DIM
    }

    fn log_joint_on(&self, tape: &mut Tape, x: &Tensor, z: Var) -> Result<Var> {
        let rows = tape.value(z).rows();
        let zeros = tape.constant(Tensor::zeros(&[rows, LATENT_DIM]))?;
        let prior = gaussian_log_prob(tape, zeros, zeros, z)?;
        let (mu, log_sigma) = self.moments_on(tape, z)?;
        let xv = tape.constant(x.clone())?;
        let lik = gaussian_log_prob(tape, mu, log_sigma, xv)?;
        tape.add(prior, lik)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::normal_log_pdf;

    #[test]
    fn decoder_is_a_fixed_constant() {
        let a = SyntheticDecoder::new();
        let b = SyntheticDecoder::new();
        assert_eq!(a.graph.flat_values(), b.graph.flat_values());
        let (mu, sigma) = a.moments(&[0.1, -0.2, 0.3, 0.0]).unwrap();
        assert_eq!(mu.len(), OBSERVED_DIM);
        assert!(sigma.iter().all(|&s| s > 0.0));
        // Heteroscedastic: the noise scale moves with z.
        let (_, other) = a.moments(&[2.0, 1.0, -2.0, 0.5]).unwrap();
        assert!(sigma.iter().zip(&other).any(|(s, o)| (s - o).abs() > 1e-3));
    }

    #[test]
    fn log_joint_matches_pointwise_densities() {
        let d = SyntheticDecoder::new();
        let mut rng = substream(0, "sim");
        let s = d.draw(&mut rng).unwrap();
        let (mu, sigma) = d.moments(&s.z).unwrap();
        let expected: f64 = s.z.iter().map(|&v| normal_log_pdf(v, 0.0, 1.0)).sum::<f64>()
            + s.x
                .iter()
                .zip(mu.iter().zip(&sigma))
                .map(|(&x, (&m, &sd))| normal_log_pdf(x, m, sd))
                .sum::<f64>();
        let mut tape = Tape::new();
        let zv = tape
            .constant(Tensor::new(&[1, LATENT_DIM], s.z.clone()).unwrap())
            .unwrap();
        let lp = d
            .log_joint_on(&mut tape, &Tensor::new(&[1, OBSERVED_DIM], s.x).unwrap(), zv)
            .unwrap();
        assert!((tape.value(lp).item() - expected).abs() < 1e-10);
    }
}
