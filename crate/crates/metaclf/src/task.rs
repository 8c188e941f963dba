//! Two-class Gaussian classification tasks and ensembles of them.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{MetaError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: bool,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, y: bool) -> Self {
        Self { x, y }
    }
}

/// `p(y = 1) = class_prior`, `x | y ~ N(means[y], covs[y])`.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub id: usize,
    pub class_prior: f64,
    pub means: [DVector<f64>; 2],
    pub covs: [DMatrix<f64>; 2],
    chol: [DMatrix<f64>; 2],
    half_log_det: [f64; 2],
}

impl TaskModel {
    pub fn new(id: usize, class_prior: f64, means: [DVector<f64>; 2], covs: [DMatrix<f64>; 2]) -> Result<Self> {
        if !(class_prior > 0.0 && class_prior < 1.0) {
            return Err(MetaError::InvalidConfig(format!(
                "class prior {class_prior} outside (0, 1)"
            )));
        }
        let dim = means[0].len();
        if means[1].len() != dim || covs.iter().any(|c| c.nrows() != dim || c.ncols() != dim) {
            return Err(MetaError::InvalidConfig(
                "class parameters disagree on dimension".into(),
            ));
        }
        let factor = |c: &DMatrix<f64>| {
            c.clone()
                .cholesky()
                .map(|ch| ch.l())
                .ok_or_else(|| MetaError::InvalidConfig("class covariance is not positive definite".into()))
        };
        let chol = [factor(&covs[0])?, factor(&covs[1])?];
        let half_log_det = [0, 1].map(|c| chol[c].diagonal().iter().map(|d| d.ln()).sum());
        Ok(Self {
            id,
            class_prior,
            means,
            covs,
            chol,
            half_log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log N(x; μ_c, Σ_c)`.
    pub fn class_log_density(&self, x: &[f64], class: bool) -> f64 {
        let c = class as usize;
        let diff = DVector::from_column_slice(x) - &self.means[c];
        let v = self.chol[c]
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * (self.dim() as f64 * LN_2PI + v.norm_squared()) - self.half_log_det[c]
    }

    pub fn log_prior(&self, class: bool) -> f64 {
        if class {
            self.class_prior.ln()
        } else {
            (1.0 - self.class_prior).ln()
        }
    }

    /// `log p(x, y | model)`.
    pub fn log_joint(&self, point: &LabeledPoint) -> f64 {
        self.log_prior(point.y) + self.class_log_density(&point.x, point.y)
    }

    /// `log p(x | model)`, marginal over the label.
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let a = self.log_prior(true) + self.class_log_density(x, true);
        let b = self.log_prior(false) + self.class_log_density(x, false);
        favi_core::tape::log_sum_exp(&[a, b])
    }

    /// `p(y = 1 | x, model)`.
    pub fn predictive(&self, x: &[f64]) -> f64 {
        let a = self.log_prior(true) + self.class_log_density(x, true);
        let b = self.log_prior(false) + self.class_log_density(x, false);
        favi_core::tape::sigmoid(a - b)
    }

    pub fn log_likelihood(&self, data: &[LabeledPoint]) -> f64 {
        data.iter().map(|p| self.log_joint(p)).sum()
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> LabeledPoint {
        let y = rng.random::<f64>() < self.class_prior;
        let c = y as usize;
        let e = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        let x = &self.means[c] + &self.chol[c] * e;
        LabeledPoint::new(x.as_slice().to_vec(), y)
    }
}

/// Generative family of tasks: class prior `~ U(prior_range)`, class means `~ N(0, mean_scale² I)`,
/// class covariances `R diag(u) Rᵀ` with Haar-random rotation `R` and `u_i ~ U(scale_range)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub dim: usize,
    pub prior_range: (f64, f64),
    pub mean_scale: f64,
    pub scale_range: (f64, f64),
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            prior_range: (0.25, 0.75),
            mean_scale: 1.5,
            scale_range: (0.25, 2.0),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let (p0, p1) = self.prior_range;
        let (u0, u1) = self.scale_range;
        if self.dim == 0 || !(0.0 < p0 && p0 <= p1 && p1 < 1.0) || !(self.mean_scale >= 0.0) || !(0.0 < u0 && u0 <= u1)
        {
            return Err(MetaError::InvalidConfig(format!("bad ensemble configuration {self:?}")));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 == range.1 {
        return range.0;
    }
    Uniform::new(range.0, range.1).expect("validated range").sample(rng)
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs of `R`'s diagonal
/// folded into `Q`.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn sample_task<R: Rng + ?Sized>(config: &EnsembleConfig, id: usize, rng: &mut R) -> Result<TaskModel> {
    config.validate()?;
    let d = config.dim;
    let class_prior = uniform(config.prior_range, rng);
    let mut mean = || {
        DVector::from_fn(d, |_, _| {
            let e: f64 = StandardNormal.sample(rng);
            config.mean_scale * e
        })
    };
    let means = [mean(), mean()];
    let mut cov = || {
        let r = random_rotation(d, rng);
        let u = DVector::from_fn(d, |_, _| uniform(config.scale_range, rng));
        let c = &r * DMatrix::from_diagonal(&u) * r.transpose();
        0.5 * (&c + c.transpose())
    };
    let covs = [cov(), cov()];
    TaskModel::new(id, class_prior, means, covs)
}

/// `N` training pairs plus a query, all i.i.d. from one task.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub model: Arc<TaskModel>,
    pub train: Vec<LabeledPoint>,
    pub query: LabeledPoint,
}

pub fn sample_instance<R: Rng + ?Sized>(model: &Arc<TaskModel>, n: usize, rng: &mut R) -> TaskInstance {
    let train = (0..n).map(|_| model.sample_point(rng)).collect();
    TaskInstance {
        model: Arc::clone(model),
        train,
        query: model.sample_point(rng),
    }
}

/// Finitely many tasks with prior weights.
#[derive(Clone, Debug)]
pub struct FiniteEnsemble {
    pub models: Vec<Arc<TaskModel>>,
    /// Normalized log prior weights.
    pub log_prior: Vec<f64>,
}

impl FiniteEnsemble {
    pub fn new(models: Vec<TaskModel>, weights: &[f64]) -> Result<Self> {
        if models.is_empty() || models.len() != weights.len() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(MetaError::InvalidConfig(
                "ensemble needs one positive weight per model".into(),
            ));
        }
        let dim = models[0].dim();
        if let Some(m) = models.iter().find(|m| m.dim() != dim) {
            return Err(MetaError::Dimension {
                expected: dim,
                got: m.dim(),
            });
        }
        let total: f64 = weights.iter().sum();
        Ok(Self {
            models: models.into_iter().map(Arc::new).collect(),
            log_prior: weights.iter().map(|w| (w / total).ln()).collect(),
        })
    }

    pub fn uniform(models: Vec<TaskModel>) -> Result<Self> {
        let w = vec![1.0; models.len()];
        Self::new(models, &w)
    }

    /// `k` tasks drawn from the family, equally weighted.
    pub fn sample<R: Rng + ?Sized>(config: &EnsembleConfig, k: usize, rng: &mut R) -> Result<Self> {
        let models = (0..k)
            .map(|id| sample_task(config, id, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(models)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn draw_model<R: Rng + ?Sized>(&self, rng: &mut R) -> &Arc<TaskModel> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (m, lp) in self.models.iter().zip(&self.log_prior) {
            acc += lp.exp();
            if u < acc {
                return m;
            }
        }
        self.models.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use favi_core::rng::substream;

    fn iso_task(sep: f64, prior: f64) -> TaskModel {
        let mut m1 = DVector::zeros(10);
        m1[0] = sep;
        TaskModel::new(
            0,
            prior,
            [DVector::zeros(10), m1],
            [DMatrix::identity(10, 10), DMatrix::identity(10, 10)],
        )
        .unwrap()
    }

    #[test]
    fn gaussian_log_density_matches_closed_form() {
        let t = iso_task(2.0, 0.5);
        let x = vec![0.5; 10];
        let expect = -0.5 * (10.0 * LN_2PI + 10.0 * 0.25);
        assert!((t.class_log_density(&x, false) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_mean_scale_makes_classes_indistinguishable() {
        let cfg = EnsembleConfig {
            mean_scale: 0.0,
            scale_range: (1.0, 1.0),
            ..EnsembleConfig::default()
        };
        let t = sample_task(&cfg, 0, &mut substream(0, "tasks")).unwrap();
        let mut rng = substream(1, "x");
        for _ in 0..20 {
            let p = t.sample_point(&mut rng);
            assert!((t.predictive(&p.x) - t.class_prior).abs() < 1e-12);
        }
    }

    #[test]
    fn tasks_are_seed_deterministic() {
        let cfg = EnsembleConfig::default();
        let a = sample_task(&cfg, 3, &mut substream(9, "tasks")).unwrap();
        let b = sample_task(&cfg, 3, &mut substream(9, "tasks")).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.covs, b.covs);
        assert_eq!(a.class_prior, b.class_prior);
    }

    #[test]
    fn sampled_covariances_are_spd_with_configured_spectrum() {
        let cfg = EnsembleConfig::default();
        let t = sample_task(&cfg, 0, &mut substream(2, "tasks")).unwrap();
        for c in &t.covs {
            let eig = c.clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| (0.25 - 1e-9..=2.0 + 1e-9).contains(&l)), "{eig}");
        }
        let r = random_rotation(10, &mut substream(3, "rot"));
        assert!((&r * r.transpose() - DMatrix::<f64>::identity(10, 10)).abs().max() < 1e-12);
    }

    #[test]
    fn ten_sigma_separation_is_nearly_error_free() {
        let t = iso_task(10.0, 0.5);
        let mut rng = substream(4, "x");
        let errors = (0..100_000)
            .filter(|_| {
                let p = t.sample_point(&mut rng);
                (t.predictive(&p.x) > 0.5) != p.y
            })
            .count();
        assert!(errors < 100, "{errors}");
    }

    #[test]
    fn instances_have_requested_size() {
        let t = Arc::new(iso_task(1.0, 0.5));
        let inst = sample_instance(&t, 0, &mut substream(5, "x"));
        assert!(inst.train.is_empty() && inst.query.x.len() == 10);
        let sure = Arc::new(iso_task(1.0, 1.0 - 1e-12));
        let inst = sample_instance(&sure, 50, &mut substream(5, "x"));
        assert!(inst.train.iter().all(|p| p.y));
    }

    #[test]
    fn label_frequency_matches_class_prior() {
        let t = Arc::new(iso_task(1.0, 0.3));
        let inst = sample_instance(&t, 10_000, &mut substream(6, "x"));
        let freq = inst.train.iter().filter(|p| p.y).count() as f64 / 1e4;
        assert!((freq - 0.3).abs() < 0.015, "{freq}");
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad = DMatrix::from_diagonal_element(10, 10, -1.0);
        assert!(TaskModel::new(0, 0.5, [DVector::zeros(10), DVector::zeros(10)], [bad.clone(), bad]).is_err());
        assert!(TaskModel::new(
            0,
            1.0,
            [DVector::zeros(1), DVector::zeros(1)],
            [DMatrix::identity(1, 1), DMatrix::identity(1, 1)]
        )
        .is_err());
    }
}
