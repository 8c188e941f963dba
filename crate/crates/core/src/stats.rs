//! Summary statistics and the percentile bootstrap.

use rand::Rng;

use crate::error::{Error, Result};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

pub fn standard_error(v: &[f64]) -> f64 {
    (variance(v) / v.len() as f64).sqrt()
}

/// Linear-interpolation quantile of unsorted data, `q ∈ [0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Two-sided percentile interval for a statistic of the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn excludes_zero_above(&self) -> bool {
        self.lower > 0.0
    }
}

/// Percentile bootstrap of `statistic` over `reps` resamples with replacement.
pub fn bootstrap<R, F>(data: &[f64], statistic: F, reps: usize, level: f64, rng: &mut R) -> Result<Interval>
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    if data.is_empty() || reps == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(
            "bootstrap needs data, replicates and a level in (0, 1)".into(),
        ));
    }
    let mut buf = vec![0.0; data.len()];
    let stats: Vec<f64> = (0..reps)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = data[rng.random_range(0..data.len())];
            }
            statistic(&buf)
        })
        .collect();
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        estimate: statistic(data),
        lower: quantile(&stats, alpha),
        upper: quantile(&stats, 1.0 - alpha),
    })
}

/// Bootstrap of the ratio of means `mean(num) / mean(den)` over paired rows.
pub fn bootstrap_ratio<R: Rng + ?Sized>(
    num: &[f64],
    den: &[f64],
    reps: usize,
    level: f64,
    rng: &mut R,
) -> Result<Interval> {
    if num.len() != den.len() || num.is_empty() || reps == 0 {
        return Err(Error::InvalidArgument(
            "paired bootstrap needs equal, non-empty columns".into(),
        ));
    }
    let n = num.len();
    let ratio = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut a, mut b) = (0.0, 0.0);
        for i in idx {
            a += num[i];
            b += den[i];
        }
        a / b
    };
    let stats: Vec<f64> = (0..reps)
        .map(|_| {
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            ratio(&mut picks.into_iter())
        })
        .collect();
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval {
        estimate: ratio(&mut (0..n)),
        lower: quantile(&stats, alpha),
        upper: quantile(&stats, 1.0 - alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn summaries() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((variance(&v) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let mut rng = substream(0, "boot");
        let data: Vec<f64> = (0..500).map(|i| (i % 7) as f64).collect();
        let ci = bootstrap(&data, mean, 2000, 0.95, &mut rng).unwrap();
        assert!(ci.lower < ci.estimate && ci.estimate < ci.upper);
        // Half-width is close to 1.96 standard errors.
        let se = standard_error(&data);
        assert!(((ci.upper - ci.lower) / 2.0 - 1.96 * se).abs() < 0.3 * se);
        let r = bootstrap_ratio(&data, &data, 200, 0.95, &mut rng).unwrap();
        assert_eq!((r.lower, r.estimate, r.upper), (1.0, 1.0, 1.0));
    }
}
