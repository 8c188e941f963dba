//! Tabular datasets and the small-data evaluation protocol.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::baselines::Classifier;
use crate::error::{MetaError, Result};
use crate::task::LabeledPoint;

pub const FEATURES: usize = 10;
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelRule {
    /// Labels are already two-valued; the smaller value maps to 0.
    Binary,
    /// Values below the median of the whole column map to 0, the rest to 1.
    Median,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub label_column: String,
    /// Explicit feature columns; by default the first ten non-label columns.
    pub feature_columns: Option<Vec<String>>,
    pub label_rule: LabelRule,
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub points: Vec<LabeledPoint>,
    /// Standardize each sampled subset with its own training statistics.
    pub standardize: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn binarize_at_median(v: &[f64]) -> Vec<bool> {
    let m = median(v);
    v.iter().map(|&x| x >= m).collect()
}

pub fn ingest_csv(path: &Path, options: &IngestOptions) -> Result<Dataset> {
    let fail = |message: String| MetaError::Data {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let label_idx = *index
        .get(options.label_column.as_str())
        .ok_or_else(|| fail(format!("no label column {:?}", options.label_column)))?;
    let feature_names: Vec<String> = match &options.feature_columns {
        Some(cols) => cols.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx)
            .map(|(_, h)| h.clone())
            .take(FEATURES)
            .collect(),
    };
    if feature_names.len() < FEATURES {
        return Err(fail(format!(
            "need {FEATURES} feature columns, found {}",
            feature_names.len()
        )));
    }
    let feature_names: Vec<String> = feature_names.into_iter().take(FEATURES).collect();
    let feature_idx = feature_names
        .iter()
        .map(|n| {
            index
                .get(n.as_str())
                .copied()
                .ok_or_else(|| fail(format!("no feature column {n:?}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut xs = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let cell = |i: usize| -> Result<f64> {
            let s = record.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Err(fail(format!("line {line}: missing value in column {:?}", header[i])));
            }
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                fail(format!(
                    "line {line}: non-numeric value {s:?} in column {:?}",
                    header[i]
                ))
            })
        };
        xs.push(feature_idx.iter().map(|&i| cell(i)).collect::<Result<Vec<_>>>()?);
        raw_labels.push(cell(label_idx)?);
    }
    let labels = match options.label_rule {
        LabelRule::Median => binarize_at_median(&raw_labels),
        LabelRule::Binary => {
            let mut distinct: Vec<f64> = raw_labels.clone();
            distinct.sort_by(|a, b| a.total_cmp(b));
            distinct.dedup();
            if distinct.len() > 2 {
                return Err(fail(format!(
                    "label column has {} distinct values; use median binarization",
                    distinct.len()
                )));
            }
            let hi = *distinct.last().unwrap_or(&0.0);
            raw_labels.iter().map(|&v| distinct.len() == 2 && v == hi).collect()
        }
    };
    Ok(Dataset {
        feature_names,
        points: xs
            .into_iter()
            .zip(labels)
            .map(|(x, y)| LabeledPoint::new(x, y))
            .collect(),
        standardize: options.standardize,
    })
}

/// Standardizes `train` and `query` with the mean and deviation of `train` alone. Columns whose
/// deviation is below [`STD_FLOOR`] become zero.
pub fn standardize(train: &mut [LabeledPoint], query: &mut [f64]) {
    let d = query.len();
    let n = train.len().max(1) as f64;
    for j in 0..d {
        let mean = train.iter().map(|p| p.x[j]).sum::<f64>() / n;
        let var = train.iter().map(|p| (p.x[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd < STD_FLOOR { 0.0 } else { 1.0 / sd };
        for p in train.iter_mut() {
            p.x[j] = (p.x[j] - mean) * scale;
        }
        query[j] = (query[j] - mean) * scale;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub predictor: String,
    pub n: usize,
    pub accuracy: f64,
    pub stderr: f64,
}

/// Hard label from a probability; exact ties are broken by a fair coin.
pub fn decide<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    if p == 0.5 {
        rng.random()
    } else {
        p > 0.5
    }
}

/// For each `N` and repeat, draws `N + 1` distinct points, hands the first `N` to every
/// predictor as `D` and scores its decision on the last. Predictors are never refit between
/// calls beyond what `predict` does with `D`.
pub fn evaluate_small_data<R: Rng + ?Sized>(
    dataset: &Dataset,
    predictors: &[&dyn Classifier],
    n_values: &[usize],
    repeats: usize,
    rng: &mut R,
) -> Result<Vec<AccuracyRow>> {
    let max_n = n_values.iter().copied().max().unwrap_or(0);
    if dataset.len() <= max_n + 1 {
        return Err(MetaError::TooSmall {
            rows: dataset.len(),
            needed: max_n + 1,
        });
    }
    if repeats == 0 {
        return Err(MetaError::InvalidConfig("repeats must be positive".into()));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        let mut correct = vec![0usize; predictors.len()];
        for _ in 0..repeats {
            let idx = sample(rng, dataset.len(), n + 1).into_vec();
            let mut train: Vec<LabeledPoint> = idx[..n].iter().map(|&i| dataset.points[i].clone()).collect();
            let target = &dataset.points[idx[n]];
            let mut query = target.x.clone();
            if dataset.standardize {
                standardize(&mut train, &mut query);
            }
            for (c, p) in correct.iter_mut().zip(predictors) {
                let prob = p.predict(&train, &query)?;
                if decide(prob, rng) == target.y {
                    *c += 1;
                }
            }
        }
        for (c, p) in correct.iter().zip(predictors) {
            let acc = *c as f64 / repeats as f64;
            rows.push(AccuracyRow {
                predictor: p.name(),
                n,
                accuracy: acc,
                stderr: (acc * (1.0 - acc) / repeats as f64).sqrt(),
            });
        }
    }
    Ok(rows)
}

pub fn write_accuracy_csv(path: &Path, rows: &[AccuracyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["predictor", "N", "accuracy", "stderr"])?;
    for r in rows {
        w.write_record([
            r.predictor.clone(),
            r.n.to_string(),
            r.accuracy.to_string(),
            r.stderr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{Constant, Majority};
    use favi_core::rng::substream;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    fn header(extra: &str) -> String {
        let mut h: Vec<String> = (0..10).map(|i| format!("f{i}")).collect();
        h.push(extra.into());
        h.join(",") + "\n"
    }

    fn options(rule: LabelRule) -> IngestOptions {
        IngestOptions {
            label_column: "target".into(),
            feature_columns: None,
            label_rule: rule,
            standardize: true,
        }
    }

    #[test]
    fn median_split_of_one_to_four() {
        assert_eq!(
            binarize_at_median(&[1.0, 2.0, 3.0, 4.0]),
            vec![false, false, true, true]
        );
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn constant_columns_standardize_to_zero() {
        let mut train: Vec<LabeledPoint> = (0..5)
            .map(|i| LabeledPoint::new(vec![7.0, i as f64], i % 2 == 0))
            .collect();
        let mut q = vec![9.0, 2.0];
        standardize(&mut train, &mut q);
        assert!(train.iter().all(|p| p.x[0] == 0.0) && q[0] == 0.0 && q[1] == 0.0);
        let m: f64 = train.iter().map(|p| p.x[1]).sum::<f64>() / 5.0;
        let v: f64 = train.iter().map(|p| p.x[1] * p.x[1]).sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-15 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let row = |v: &str| (0..10).map(|_| v).collect::<Vec<_>>().join(",");
        let missing = write(&dir, "a.csv", &(header("target") + &row("1") + ",\n"));
        assert!(matches!(
            ingest_csv(&missing, &options(LabelRule::Binary)),
            Err(MetaError::Data { .. })
        ));
        let text = write(&dir, "b.csv", &(header("target") + &row("x") + ",1\n"));
        assert!(matches!(
            ingest_csv(&text, &options(LabelRule::Binary)),
            Err(MetaError::Data { .. })
        ));
        let narrow = write(&dir, "c.csv", "a,b,target\n1,2,0\n");
        assert!(matches!(
            ingest_csv(&narrow, &options(LabelRule::Binary)),
            Err(MetaError::Data { .. })
        ));
        let ok = write(
            &dir,
            "d.csv",
            &(header("target") + &row("1") + ",4\n" + &row("2") + ",1\n"),
        );
        let d = ingest_csv(&ok, &options(LabelRule::Median)).unwrap();
        assert_eq!(d.points.iter().map(|p| p.y).collect::<Vec<_>>(), vec![true, false]);
    }

    fn skewed(n: usize) -> Dataset {
        Dataset {
            feature_names: (0..10).map(|i| format!("f{i}")).collect(),
            points: (0..n)
                .map(|i| LabeledPoint::new(vec![i as f64; 10], i % 10 != 0))
                .collect(),
            standardize: false,
        }
    }

    #[test]
    fn majority_rule_tracks_the_dominant_label() {
        let rows = evaluate_small_data(&skewed(1000), &[&Majority], &[42], 500, &mut substream(0, "eval")).unwrap();
        assert!((rows[0].accuracy - 0.9).abs() < 0.04, "{rows:?}");
    }

    #[test]
    fn coin_flips_score_one_half() {
        let rows = evaluate_small_data(&skewed(200), &[&Constant(0.5)], &[12], 500, &mut substream(1, "eval")).unwrap();
        assert!((rows[0].accuracy - 0.5).abs() < 3.0 * 0.5 / 500f64.sqrt(), "{rows:?}");
    }

    #[test]
    fn evaluation_is_seed_deterministic_and_size_checked() {
        let d = skewed(100);
        let a = evaluate_small_data(
            &d,
            &[&Majority, &Constant(0.5)],
            &[12, 22],
            50,
            &mut substream(2, "eval"),
        )
        .unwrap();
        let b = evaluate_small_data(
            &d,
            &[&Majority, &Constant(0.5)],
            &[12, 22],
            50,
            &mut substream(2, "eval"),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            evaluate_small_data(&skewed(40), &[&Majority], &[42], 5, &mut substream(2, "eval")),
            Err(MetaError::TooSmall { .. })
        ));
    }
}
