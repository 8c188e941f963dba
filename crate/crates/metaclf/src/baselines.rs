//! Predictors for the small-data harness: each maps `(D, x*)` to `p(y* = 1)`.

use favi_core::adam::{AdamConfig, AdamState};
use favi_core::families::bernoulli_log_prob;
use favi_core::tape::sigmoid;
use favi_core::{ParamGraph, Tape, Tensor};

use crate::encoder::MetaClassifier;
use crate::error::Result;
use crate::task::LabeledPoint;

pub trait Classifier {
    fn name(&self) -> String;
    fn predict(&self, train: &[LabeledPoint], query: &[f64]) -> Result<f64>;
}

fn label_frequency(train: &[LabeledPoint]) -> f64 {
    if train.is_empty() {
        return 0.5;
    }
    train.iter().filter(|p| p.y).count() as f64 / train.len() as f64
}

/// L2-penalized logistic regression fitted by gradient descent on every call.
/// Falls back to the label frequency when `D` holds a single class.
#[derive(Clone, Debug)]
pub struct Logistic {
    pub l2: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for Logistic {
    fn default() -> Self {
        Self {
            l2: 0.1,
            steps: 300,
            step_size: 0.05,
        }
    }
}

impl Logistic {
    /// Weights followed by the intercept.
    pub fn fit(&self, train: &[LabeledPoint]) -> Result<Vec<f64>> {
        let d = train[0].x.len();
        let n = train.len();
        let mut graph = ParamGraph::new();
        let w = graph.add("w", Tensor::zeros(&[d, 1]))?;
        let b = graph.add("b", Tensor::zeros(&[1]))?;
        let rows: Vec<&[f64]> = train.iter().map(|p| p.x.as_slice()).collect();
        let x = Tensor::from_rows(&rows)?;
        let y = Tensor::new(&[n, 1], train.iter().map(|p| p.y as u8 as f64).collect())?;
        let mut adam = AdamState::new(
            &graph,
            AdamConfig {
                step_size: self.step_size,
                ..AdamConfig::default()
            },
        );
        for _ in 0..self.steps {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let wv = tape.param(&graph, w)?;
            let bv = tape.param(&graph, b)?;
            let logits = tape.affine(xv, wv, bv)?;
            let lp = bernoulli_log_prob(&mut tape, logits, &y)?;
            let nll = tape.mean(lp)?;
            let nll = tape.scale(nll, -1.0)?;
            let sq = tape.square(wv)?;
            let pen = tape.sum(sq)?;
            let pen = tape.scale(pen, 0.5 * self.l2 / n as f64)?;
            let loss = tape.add(nll, pen)?;
            graph.backward(&tape, loss, &Tensor::scalar(1.0))?;
            adam.step(&mut graph)?;
        }
        let mut out = graph.value(w).data().to_vec();
        out.push(graph.value(b).item());
        Ok(out)
    }
}

impl Classifier for Logistic {
    fn name(&self) -> String {
        "logistic".into()
    }

    fn predict(&self, train: &[LabeledPoint], query: &[f64]) -> Result<f64> {
        let freq = label_frequency(train);
        if freq == 0.0 || freq == 1.0 || train.is_empty() {
            return Ok(freq);
        }
        let coef = self.fit(train)?;
        let (w, b) = coef.split_at(query.len());
        Ok(sigmoid(w.iter().zip(query).map(|(a, x)| a * x).sum::<f64>() + b[0]))
    }
}

/// Fraction of label 1 among the `k` nearest training points (all of them if `k ≥ N`).
#[derive(Clone, Copy, Debug)]
pub struct Knn {
    pub k: usize,
}

impl Classifier for Knn {
    fn name(&self) -> String {
        format!("knn{}", self.k)
    }

    fn predict(&self, train: &[LabeledPoint], query: &[f64]) -> Result<f64> {
        let mut by_distance: Vec<(f64, bool)> = train
            .iter()
            .map(|p| (p.x.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), p.y))
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0));
        let nearest: Vec<LabeledPoint> = by_distance
            .iter()
            .take(self.k.max(1))
            .map(|&(_, y)| LabeledPoint::new(Vec::new(), y))
            .collect();
        Ok(label_frequency(&nearest))
    }
}

/// The majority label of `D` as a 0/1 probability (1/2 on ties).
#[derive(Clone, Copy, Debug)]
pub struct Majority;

impl Classifier for Majority {
    fn name(&self) -> String {
        "majority".into()
    }

    fn predict(&self, train: &[LabeledPoint], _: &[f64]) -> Result<f64> {
        let f = label_frequency(train);
        Ok(if f > 0.5 {
            1.0
        } else if f < 0.5 {
            0.0
        } else {
            0.5
        })
    }
}

/// Always the same probability; 1/2 makes the harness guess.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl Classifier for Constant {
    fn name(&self) -> String {
        format!("constant{}", self.0)
    }

    fn predict(&self, _: &[LabeledPoint], _: &[f64]) -> Result<f64> {
        Ok(self.0)
    }
}

impl Classifier for MetaClassifier {
    fn name(&self) -> String {
        "metaclassifier".into()
    }

    fn predict(&self, train: &[LabeledPoint], query: &[f64]) -> Result<f64> {
        MetaClassifier::predict(self, train, query)
    }
}
