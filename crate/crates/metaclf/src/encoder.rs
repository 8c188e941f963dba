//! Amortized predictive `q(y* = 1 | x*, D)`.
//!
//! The pooled encoder embeds every `(x, y)` pair, averages the embeddings over `D`, and feeds
//! `[context, |D| / n_max, embed(x*), context ⊙ embed(x*)]` to a small head. Averaging makes
//! the output exactly invariant to the order of `D`. The recurrent encoder instead runs an
//! Elman network over `D` in the given order and uses its final state as the context.

use std::collections::HashMap;
use std::path::Path;

use favi_core::checkpoint;
use favi_core::families::bernoulli_log_prob;
use favi_core::favi::FaviModel;
use favi_core::nn::{Activation, Dense, Mlp};
use favi_core::rng::substream;
use favi_core::tape::sigmoid;
use favi_core::{ParamGraph, Tape, Tensor, Var};

use crate::error::{MetaError, Result};
use crate::task::{LabeledPoint, TaskInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Pooled,
    Recurrent,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Pooled => "pooled",
            EncoderKind::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pooled" => Some(EncoderKind::Pooled),
            "recurrent" => Some(EncoderKind::Recurrent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub width: usize,
    /// Training-set size that maps to a count feature of 1.
    pub n_max: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Pooled,
            dim: 10,
            width: 64,
            n_max: 64,
        }
    }
}

#[derive(Clone, Debug)]
enum Context {
    Pooled(Mlp),
    Recurrent { input: Dense, hidden: Dense },
}

#[derive(Clone, Debug)]
pub struct MetaClassifier {
    pub config: EncoderConfig,
    pub graph: ParamGraph,
    context: Context,
    query: Dense,
    head: Mlp,
}

fn pair_row(p: &LabeledPoint) -> impl Iterator<Item = f64> + '_ {
    p.x.iter().copied().chain(std::iter::once(if p.y { 1.0 } else { -1.0 }))
}

impl MetaClassifier {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 || config.width == 0 || config.n_max == 0 {
            return Err(MetaError::InvalidConfig(format!(
                "bad encoder configuration {config:?}"
            )));
        }
        let mut rng = substream(seed, "init");
        let mut graph = ParamGraph::new();
        let w = config.width;
        let context = match config.kind {
            EncoderKind::Pooled => Context::Pooled(Mlp::new(
                &mut graph,
                "pair",
                &[config.dim + 1, w, w],
                Activation::Tanh,
                &mut rng,
            )?),
            EncoderKind::Recurrent => Context::Recurrent {
                input: Dense::new(&mut graph, "rnn.input", config.dim + 1, w, &mut rng)?,
                hidden: Dense::new(&mut graph, "rnn.hidden", w, w, &mut rng)?,
            },
        };
        let query = Dense::new(&mut graph, "query", config.dim, w, &mut rng)?;
        let head = Mlp::new(&mut graph, "head", &[3 * w + 1, w, 1], Activation::Tanh, &mut rng)?;
        Ok(Self {
            config,
            graph,
            context,
            query,
            head,
        })
    }

    /// Zeroes the output layer so every prediction is exactly 1/2.
    pub fn zero_output(&mut self) {
        self.head.layers().last().unwrap().zero(&mut self.graph);
    }

    fn check(&self, train: &[LabeledPoint], query: &[f64]) -> Result<()> {
        let bad = train
            .iter()
            .map(|p| p.x.len())
            .chain(std::iter::once(query.len()))
            .find(|&d| d != self.config.dim);
        match bad {
            Some(got) => Err(MetaError::Dimension {
                expected: self.config.dim,
                got,
            }),
            None => Ok(()),
        }
    }

    fn pooled_context(&self, tape: &mut Tape, net: &Mlp, sets: &[&[LabeledPoint]]) -> Result<Var> {
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        for set in sets {
            rows.extend(set.iter().flat_map(pair_row));
            offsets.push(offsets.last().unwrap() + set.len());
        }
        let total = *offsets.last().unwrap();
        let w = self.config.width;
        if total == 0 {
            return Ok(tape.constant(Tensor::zeros(&[sets.len(), w]))?);
        }
        let x = tape.constant(Tensor::new(&[total, self.config.dim + 1], rows)?)?;
        let h = net.forward(tape, &self.graph, x)?;
        let h = tape.tanh(h)?;
        Ok(tape.segment_mean(h, &offsets)?)
    }

    fn recurrent_context(
        &self,
        tape: &mut Tape,
        input: &Dense,
        hidden: &Dense,
        sets: &[&[LabeledPoint]],
    ) -> Result<Var> {
        let (b, w, d) = (sets.len(), self.config.width, self.config.dim + 1);
        let mut h = tape.constant(Tensor::zeros(&[b, w]))?;
        let steps = sets.iter().map(|s| s.len()).max().unwrap_or(0);
        for t in 0..steps {
            let mut rows = vec![0.0; b * d];
            let mut mask = vec![0.0; b * w];
            for (i, s) in sets.iter().enumerate() {
                if let Some(p) = s.get(t) {
                    for (dst, v) in rows[i * d..(i + 1) * d].iter_mut().zip(pair_row(p)) {
                        *dst = v;
                    }
                    mask[i * w..(i + 1) * w].fill(1.0);
                }
            }
            let x = tape.constant(Tensor::new(&[b, d], rows)?)?;
            let a = input.forward(tape, &self.graph, x)?;
            let r = hidden.forward(tape, &self.graph, h)?;
            let pre = tape.add(a, r)?;
            let next = tape.tanh(pre)?;
            let step = tape.sub(next, h)?;
            let m = tape.constant(Tensor::new(&[b, w], mask)?)?;
            let gated = tape.mul(step, m)?;
            h = tape.add(h, gated)?;
        }
        Ok(h)
    }

    /// Logits `[batch, 1]` for each `(D, x*)`.
    pub fn logits_on(&self, tape: &mut Tape, sets: &[&[LabeledPoint]], queries: &[&[f64]]) -> Result<Var> {
        for (s, q) in sets.iter().zip(queries) {
            self.check(s, q)?;
        }
        let ctx = match &self.context {
            Context::Pooled(net) => self.pooled_context(tape, net, sets)?,
            Context::Recurrent { input, hidden } => self.recurrent_context(tape, input, hidden, sets)?,
        };
        let counts: Vec<f64> = sets.iter().map(|s| s.len() as f64 / self.config.n_max as f64).collect();
        let count = tape.constant(Tensor::new(&[sets.len(), 1], counts)?)?;
        let q = tape.constant(Tensor::new(&[queries.len(), self.config.dim], queries.concat())?)?;
        let q = self.query.forward(tape, &self.graph, q)?;
        let q = tape.tanh(q)?;
        let inter = tape.mul(ctx, q)?;
        let features = tape.concat(&[ctx, count, q, inter])?;
        Ok(self.head.forward(tape, &self.graph, features)?)
    }

    /// `q(y* = 1 | x*, D)`.
    pub fn predict(&self, train: &[LabeledPoint], query: &[f64]) -> Result<f64> {
        Ok(self.predict_batch(&[train], &[query])?[0])
    }

    pub fn predict_batch(&self, sets: &[&[LabeledPoint]], queries: &[&[f64]]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let l = self.logits_on(&mut tape, sets, queries)?;
        Ok(tape.value(l).data().iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(
            path,
            &FaviModel::<TaskInstance>::descriptor(self),
            &self.graph,
        )?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(MetaError::CheckpointMissing(path.display().to_string()));
        }
        let ckpt = checkpoint::load(path)?;
        let fields: HashMap<&str, &str> = ckpt.descriptor.split(';').filter_map(|kv| kv.split_once('=')).collect();
        let bad = || MetaError::InvalidConfig(format!("unrecognized checkpoint descriptor {}", ckpt.descriptor));
        let num = |k: &str| fields.get(k).and_then(|v| v.parse::<usize>().ok()).ok_or_else(bad);
        let config = EncoderConfig {
            kind: fields.get("kind").and_then(|k| EncoderKind::parse(k)).ok_or_else(bad)?,
            dim: num("dim")?,
            width: num("width")?,
            n_max: num("n_max")?,
        };
        let mut m = Self::new(config, 0)?;
        checkpoint::restore_into(&ckpt, &mut m.graph)?;
        Ok(m)
    }
}

impl FaviModel<TaskInstance> for MetaClassifier {
    fn graph(&self) -> &ParamGraph {
        &self.graph
    }

    fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }

    fn descriptor(&self) -> String {
        format!(
            "metaclassifier;kind={};dim={};width={};n_max={}",
            self.config.kind.name(),
            self.config.dim,
            self.config.width,
            self.config.n_max
        )
    }

    /// The task identity is never an input; only `D`, `x*` and `y*` are.
    fn batch_log_q(&self, tape: &mut Tape, batch: &[TaskInstance]) -> favi_core::Result<Var> {
        let sets: Vec<&[LabeledPoint]> = batch.iter().map(|t| t.train.as_slice()).collect();
        let queries: Vec<&[f64]> = batch.iter().map(|t| t.query.x.as_slice()).collect();
        let logits = self
            .logits_on(tape, &sets, &queries)
            .map_err(|e| favi_core::Error::InvalidArgument(e.to_string()))?;
        let labels = Tensor::new(
            &[batch.len(), 1],
            batch.iter().map(|t| t.query.y as u8 as f64).collect(),
        )?;
        bernoulli_log_prob(tape, logits, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{sample_instance, EnsembleConfig, FiniteEnsemble};
    use favi_core::favi::favi_loss_on;
    use favi_core::gradcheck::finite_diff_check;

    fn instances(n: usize, k: usize) -> Vec<TaskInstance> {
        let e = FiniteEnsemble::sample(&EnsembleConfig::default(), 2, &mut substream(0, "tasks")).unwrap();
        let mut rng = substream(0, "x");
        (0..k)
            .map(|i| sample_instance(&e.models[i % 2], n + i, &mut rng))
            .collect()
    }

    #[test]
    fn zero_output_layer_predicts_one_half() {
        for kind in [EncoderKind::Pooled, EncoderKind::Recurrent] {
            let mut m = MetaClassifier::new(
                EncoderConfig {
                    kind,
                    ..EncoderConfig::default()
                },
                1,
            )
            .unwrap();
            m.zero_output();
            for inst in instances(3, 4) {
                assert_eq!(m.predict(&inst.train, &inst.query.x).unwrap(), 0.5);
            }
        }
    }

    #[test]
    fn pooled_encoder_ignores_order() {
        let m = MetaClassifier::new(EncoderConfig::default(), 2).unwrap();
        let inst = &instances(20, 1)[0];
        let mut shuffled = inst.train.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        let a = m.predict(&inst.train, &inst.query.x).unwrap();
        let b = m.predict(&shuffled, &inst.query.x).unwrap();
        assert!((a - b).abs() <= 1e-15, "{a} {b}");
    }

    #[test]
    fn batching_matches_single_predictions() {
        for kind in [EncoderKind::Pooled, EncoderKind::Recurrent] {
            let m = MetaClassifier::new(
                EncoderConfig {
                    kind,
                    ..EncoderConfig::default()
                },
                3,
            )
            .unwrap();
            let insts = instances(0, 5);
            let sets: Vec<&[LabeledPoint]> = insts.iter().map(|t| t.train.as_slice()).collect();
            let qs: Vec<&[f64]> = insts.iter().map(|t| t.query.x.as_slice()).collect();
            let batch = m.predict_batch(&sets, &qs).unwrap();
            for (i, t) in insts.iter().enumerate() {
                assert!((batch[i] - m.predict(&t.train, &t.query.x).unwrap()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let m = MetaClassifier::new(EncoderConfig::default(), 4).unwrap();
        assert!(matches!(
            m.predict(&[], &[1.0; 9]),
            Err(MetaError::Dimension { expected: 10, got: 9 })
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for kind in [EncoderKind::Pooled, EncoderKind::Recurrent] {
            let m = MetaClassifier::new(
                EncoderConfig {
                    kind,
                    width: 6,
                    ..EncoderConfig::default()
                },
                5,
            )
            .unwrap();
            let batch = instances(2, 3);
            let mut graph = m.graph.clone();
            let err = finite_diff_check(
                &mut graph,
                |g, tape| {
                    let mut probe = m.clone();
                    probe.graph = g.clone();
                    favi_loss_on(tape, &probe, &batch)
                },
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?} {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = MetaClassifier::new(
            EncoderConfig {
                kind: EncoderKind::Recurrent,
                width: 8,
                ..EncoderConfig::default()
            },
            6,
        )
        .unwrap();
        m.save(&path).unwrap();
        let r = MetaClassifier::load(&path).unwrap();
        let inst = &instances(4, 1)[0];
        assert_eq!(
            m.predict(&inst.train, &inst.query.x).unwrap(),
            r.predict(&inst.train, &inst.query.x).unwrap()
        );
        assert!(matches!(
            MetaClassifier::load(&dir.path().join("x")),
            Err(MetaError::CheckpointMissing(_))
        ));
    }
}
