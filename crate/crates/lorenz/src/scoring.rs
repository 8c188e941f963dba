//! Interval-probability scoring, calibration and modality diagnostics.
//!
//! The EKF ensemble is scored by counting members inside the interval, the forecaster by
//! integrating its density over it.

use std::path::Path;

use favi_core::rng::substream;
use favi_core::stats::{bootstrap, bootstrap_ratio, Interval};

use crate::ekf::{ekf_filter, ekf_forecast};
use crate::error::{LorenzError, Result};
use crate::forecaster::{Forecaster, Predictive};
use crate::record::{simulate_record, RecordConfig, TrajectoryRecord};

pub const SCORE_RADIUS: f64 = 3.0;

/// Forecast mass on `[center − radius, center + radius]`.
pub fn interval_probability_density(pred: &Predictive<'_>, center: f64, radius: f64) -> f64 {
    pred.mass(center - radius, center + radius)
}

/// Fraction of samples within `radius` of `center`.
pub fn interval_probability_samples(samples: &[f64], center: f64, radius: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(LorenzError::InvalidConfig("no samples to score".into()));
    }
    let inside = samples.iter().filter(|s| (*s - center).abs() <= radius).count();
    Ok(inside as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareConfig {
    pub record: RecordConfig,
    pub trials: usize,
    pub ensemble: usize,
    pub radius: f64,
    pub bootstrap_reps: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            record: RecordConfig::default(),
            trials: 500,
            ensemble: 500,
            radius: SCORE_RADIUS,
            bootstrap_reps: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialScore {
    pub trial: usize,
    pub ekf: f64,
    pub favi: f64,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub scores: Vec<TrialScore>,
    /// `mean(favi) / mean(ekf)`.
    pub ratio: Interval,
    /// `mean(favi − ekf)`.
    pub gap: Interval,
    /// Trials where the filter failed; they score 0 for the EKF.
    pub ekf_failures: usize,
}

/// Scores both forecasters on `config.trials` fresh records from the `"eval"` substream.
pub fn compare_forecasters(forecaster: &Forecaster, config: &CompareConfig) -> Result<CompareReport> {
    let mut sim_rng = substream(config.seed, "eval");
    let mut ens_rng = substream(config.seed, "ensemble");
    let mut scores = Vec::with_capacity(config.trials);
    let mut ekf_failures = 0;
    for trial in 0..config.trials {
        let rec = simulate_record(&mut sim_rng, &config.record)?;
        let ekf = match ekf_filter(&rec.observations, &config.record).and_then(|(b, _)| {
            ekf_forecast(
                &b,
                config.ensemble,
                config.record.dt,
                config.record.horizon_steps(),
                &mut ens_rng,
            )
        }) {
            Ok(samples) => interval_probability_samples(&samples, rec.target, config.radius)?,
            Err(LorenzError::BlowUp { .. } | LorenzError::EnsembleBlowUp { .. } | LorenzError::Indefinite { .. }) => {
                ekf_failures += 1;
                0.0
            }
            Err(e) => return Err(e),
        };
        let favi = interval_probability_density(&forecaster.predictive(&rec.observations)?, rec.target, config.radius);
        scores.push(TrialScore { trial, ekf, favi });
    }
    let (ratio, gap) = summarize(&scores, config.bootstrap_reps, config.seed)?;
    Ok(CompareReport {
        scores,
        ratio,
        gap,
        ekf_failures,
    })
}

/// Paired 95% bootstrap intervals for the ratio and the difference of mean scores.
pub fn summarize(scores: &[TrialScore], reps: usize, seed: u64) -> Result<(Interval, Interval)> {
    let favi: Vec<f64> = scores.iter().map(|s| s.favi).collect();
    let ekf: Vec<f64> = scores.iter().map(|s| s.ekf).collect();
    let diff: Vec<f64> = scores.iter().map(|s| s.favi - s.ekf).collect();
    let mut rng = substream(seed, "bootstrap");
    let ratio = bootstrap_ratio(&favi, &ekf, reps, 0.95, &mut rng)?;
    let gap = bootstrap(&diff, favi_core::stats::mean, reps, 0.95, &mut rng)?;
    Ok((ratio, gap))
}

pub fn write_scores_csv(path: &Path, scores: &[TrialScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trial", "ekf_prob", "favi_prob"])?;
    for s in scores {
        w.write_record([s.trial.to_string(), s.ekf.to_string(), s.favi.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posterior_csv(path: &Path, pred: &Predictive<'_>, points: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["grid", "density"])?;
    for (z, d) in pred.tabulate(points) {
        w.write_record([z.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRow {
    pub radius: f64,
    /// Mean forecast mass of the interval centered at the forecast mean.
    pub predicted: f64,
    /// Fraction of records whose target falls in that interval.
    pub observed: f64,
}

impl CalibrationRow {
    pub fn gap(&self) -> f64 {
        (self.predicted - self.observed).abs()
    }
}

/// For each radius, compares predicted and realized coverage of `mean ± radius`.
pub fn calibration(
    forecaster: &Forecaster,
    records: &[TrajectoryRecord],
    radii: &[f64],
) -> Result<Vec<CalibrationRow>> {
    if records.is_empty() {
        return Err(LorenzError::InvalidConfig("calibration needs records".into()));
    }
    let preds = records
        .iter()
        .map(|r| forecaster.predictive(&r.observations))
        .collect::<Result<Vec<_>>>()?;
    let n = records.len() as f64;
    Ok(radii
        .iter()
        .map(|&radius| {
            let (mut predicted, mut observed) = (0.0, 0.0);
            for (p, r) in preds.iter().zip(records) {
                let m = p.mean();
                predicted += p.mass(m - radius, m + radius);
                if (r.target - m).abs() <= radius {
                    observed += 1.0;
                }
            }
            CalibrationRow {
                radius,
                predicted: predicted / n,
                observed: observed / n,
            }
        })
        .collect())
}

/// Local maxima of the density on a fine grid whose height and prominence both reach
/// `threshold × global max`.
pub fn significant_modes(pred: &Predictive<'_>, threshold: f64) -> Vec<f64> {
    let table = pred.tabulate(2001);
    let d: Vec<f64> = table.iter().map(|t| t.1).collect();
    let top = d.iter().cloned().fold(0.0, f64::max);
    let floor = threshold * top;
    let mut modes = Vec::new();
    for i in 1..d.len() - 1 {
        if !(d[i] > d[i - 1] && d[i] >= d[i + 1]) || d[i] < floor {
            continue;
        }
        let left = d[..i]
            .iter()
            .rev()
            .take_while(|&&v| v <= d[i])
            .fold(d[i], |m, &v| m.min(v));
        let right = d[i + 1..]
            .iter()
            .take_while(|&&v| v <= d[i])
            .fold(d[i], |m, &v| m.min(v));
        if d[i] - left.max(right) >= floor {
            modes.push(table[i].0);
        }
    }
    modes
}

/// Minimum distance between two modes that sit on different attractor wings: the `x₁` offset
/// of each wing's equilibrium from the origin.
pub const WING_SEPARATION: f64 = 8.485_281_374_238_57;

/// Significant modes (10% of the peak) at least [`WING_SEPARATION`] apart.
pub fn is_bimodal(pred: &Predictive<'_>) -> bool {
    let modes = significant_modes(pred, 0.1);
    match (modes.first(), modes.last()) {
        (Some(lo), Some(hi)) => hi - lo >= WING_SEPARATION,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use favi_core::families::KernelGrid;
    use rand_distr::{Distribution, StandardNormal};

    fn point_grid(centers: &[(f64, f64)]) -> KernelGrid {
        KernelGrid::new(centers.to_vec()).unwrap()
    }

    #[test]
    fn gaussian_mass_within_three_sd() {
        let g = point_grid(&[(0.0, 1.0)]);
        let p = Predictive {
            grid: &g,
            weights: vec![1.0],
        };
        assert!((interval_probability_density(&p, 0.0, 3.0) - 0.997_300_203_936_74).abs() < 1e-9);
        let narrow = point_grid(&[(0.5, 1e-3)]);
        let p = Predictive {
            grid: &narrow,
            weights: vec![1.0],
        };
        assert!((interval_probability_density(&p, 0.0, 3.0) - 1.0).abs() < 1e-6);
        assert!(interval_probability_density(&p, 10.0, 3.0) < 1e-12);
    }

    #[test]
    fn density_score_is_monotone_in_radius() {
        let g = point_grid(&[(-4.0, 1.0), (3.0, 0.5), (8.0, 2.0)]);
        let p = Predictive {
            grid: &g,
            weights: vec![0.2, 0.5, 0.3],
        };
        let mut last = 0.0;
        for r in 0..60 {
            let v = interval_probability_density(&p, 1.0, r as f64 * 0.25);
            assert!((0.0..=1.0).contains(&v) && v >= last);
            last = v;
        }
    }

    #[test]
    fn sample_score_examples() {
        assert_eq!(interval_probability_samples(&[2.0; 7], 2.0, 3.0).unwrap(), 1.0);
        assert_eq!(interval_probability_samples(&[0.0, 10.0], 0.0, 3.0).unwrap(), 0.5);
        assert!(interval_probability_samples(&[], 0.0, 3.0).is_err());
        let mut rng = substream(0, "samples");
        let s: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!((interval_probability_samples(&s, 0.0, 3.0).unwrap() - 0.9973).abs() < 0.01);
    }

    #[test]
    fn identical_scores_give_unit_ratio() {
        let scores: Vec<TrialScore> = (0..50)
            .map(|i| TrialScore {
                trial: i,
                ekf: 0.1 + 0.01 * i as f64,
                favi: 0.1 + 0.01 * i as f64,
            })
            .collect();
        let (ratio, gap) = summarize(&scores, 500, 0).unwrap();
        assert!((ratio.estimate - 1.0).abs() < 1e-12 && ratio.lower == 1.0 && ratio.upper == 1.0);
        assert_eq!(gap.estimate, 0.0);
    }

    #[test]
    fn modes_are_counted_by_prominence() {
        let g = point_grid(&[(-8.0, 1.0), (8.0, 1.0), (0.0, 1.0)]);
        let two = Predictive {
            grid: &g,
            weights: vec![0.5, 0.5, 0.0],
        };
        assert!(is_bimodal(&two));
        let lopsided = Predictive {
            grid: &g,
            weights: vec![0.97, 0.03, 0.0],
        };
        assert!(!is_bimodal(&lopsided));
        let shoulder = point_grid(&[(0.0, 1.0), (1.0, 1.0)]);
        let merged = Predictive {
            grid: &shoulder,
            weights: vec![0.5, 0.5],
        };
        assert_eq!(significant_modes(&merged, 0.1).len(), 1);
        let near = point_grid(&[(-2.0, 0.5), (2.0, 0.5)]);
        let ripple = Predictive {
            grid: &near,
            weights: vec![0.5, 0.5],
        };
        assert_eq!(significant_modes(&ripple, 0.1).len(), 2);
        assert!(!is_bimodal(&ripple));
        assert!((WING_SEPARATION - 72f64.sqrt()).abs() < 1e-12);
    }
}
