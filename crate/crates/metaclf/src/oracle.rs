//! Bayes-optimal prediction over a finite ensemble.
//!
//! Posterior weights `p(k | D) ∝ p(D | k) p(k)` are normalized in log space; the prediction is
//! `Σ_k p(y* = 1 | x*, k) p(k | D)`.

use std::path::Path;
use std::sync::Arc;

use favi_core::tape::log_sum_exp;
use rand::Rng;

use crate::baselines::Classifier;
use crate::error::{MetaError, Result};
use crate::task::{sample_instance, FiniteEnsemble, LabeledPoint};

fn check_dims(ensemble: &FiniteEnsemble, data: &[LabeledPoint], query: Option<&[f64]>) -> Result<()> {
    let dim = ensemble.dim();
    let bad = data
        .iter()
        .map(|p| p.x.len())
        .chain(query.map(|q| q.len()))
        .find(|&d| d != dim);
    match bad {
        Some(got) => Err(MetaError::Dimension { expected: dim, got }),
        None => Ok(()),
    }
}

fn normalize(log_w: Vec<f64>) -> Result<Vec<f64>> {
    let z = log_sum_exp(&log_w);
    if !z.is_finite() {
        return Err(MetaError::Degenerate);
    }
    Ok(log_w.into_iter().map(|l| (l - z).exp()).collect())
}

/// `p(k | D)` for every ensemble member.
pub fn posterior_weights(ensemble: &FiniteEnsemble, data: &[LabeledPoint]) -> Result<Vec<f64>> {
    check_dims(ensemble, data, None)?;
    normalize(
        ensemble
            .models
            .iter()
            .zip(&ensemble.log_prior)
            .map(|(m, lp)| lp + m.log_likelihood(data))
            .collect(),
    )
}

/// `p(y* = 1 | x*, D)` with weights from the training set alone.
pub fn bayes_optimal_predict(ensemble: &FiniteEnsemble, data: &[LabeledPoint], query: &[f64]) -> Result<f64> {
    check_dims(ensemble, data, Some(query))?;
    let w = posterior_weights(ensemble, data)?;
    Ok(ensemble
        .models
        .iter()
        .zip(&w)
        .map(|(m, w)| w * m.predictive(query))
        .sum())
}

/// As [`bayes_optimal_predict`], but the weights also use the unlabeled query `p(x* | k)`.
/// This is the exact predictive of a query drawn from the same task as `D`.
pub fn bayes_optimal_predict_given_query(
    ensemble: &FiniteEnsemble,
    data: &[LabeledPoint],
    query: &[f64],
) -> Result<f64> {
    check_dims(ensemble, data, Some(query))?;
    let w = normalize(
        ensemble
            .models
            .iter()
            .zip(&ensemble.log_prior)
            .map(|(m, lp)| lp + m.log_likelihood(data) + m.log_marginal(query))
            .collect(),
    )?;
    Ok(ensemble
        .models
        .iter()
        .zip(&w)
        .map(|(m, w)| w * m.predictive(query))
        .sum())
}

/// Held-out comparison of a predictor with [`bayes_optimal_predict`] at one training-set size.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGap {
    pub n: usize,
    pub draws: usize,
    pub log_loss: f64,
    pub oracle_log_loss: f64,
    pub accuracy: f64,
    pub oracle_accuracy: f64,
}

impl OracleGap {
    pub fn regret(&self) -> f64 {
        self.log_loss - self.oracle_log_loss
    }
}

fn log_loss(p: f64, y: bool) -> f64 {
    -(if y { p } else { 1.0 - p }).max(f64::MIN_POSITIVE).ln()
}

/// Draws `draws` instances of size `n` from the ensemble and scores both predictors on the
/// same `(D, x*, y*)`. Hard decisions threshold at 0.5.
pub fn compare_with_oracle<R: Rng + ?Sized>(
    predictor: &dyn Classifier,
    ensemble: &FiniteEnsemble,
    n: usize,
    draws: usize,
    rng: &mut R,
) -> Result<OracleGap> {
    if draws == 0 {
        return Err(MetaError::InvalidConfig(
            "oracle comparison needs at least one draw".into(),
        ));
    }
    let (mut loss, mut oracle_loss, mut hits, mut oracle_hits) = (0.0, 0.0, 0usize, 0usize);
    for _ in 0..draws {
        let model = Arc::clone(ensemble.draw_model(rng));
        let inst = sample_instance(&model, n, rng);
        let y = inst.query.y;
        let p = predictor.predict(&inst.train, &inst.query.x)?;
        let q = bayes_optimal_predict(ensemble, &inst.train, &inst.query.x)?;
        loss += log_loss(p, y);
        oracle_loss += log_loss(q, y);
        hits += usize::from((p > 0.5) == y);
        oracle_hits += usize::from((q > 0.5) == y);
    }
    let k = draws as f64;
    Ok(OracleGap {
        n,
        draws,
        log_loss: loss / k,
        oracle_log_loss: oracle_loss / k,
        accuracy: hits as f64 / k,
        oracle_accuracy: oracle_hits as f64 / k,
    })
}

pub fn write_oracle_csv(path: &Path, rows: &[OracleGap]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "N",
        "draws",
        "log_loss",
        "oracle_log_loss",
        "accuracy",
        "oracle_accuracy",
    ])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.draws.to_string(),
            r.log_loss.to_string(),
            r.oracle_log_loss.to_string(),
            r.accuracy.to_string(),
            r.oracle_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
