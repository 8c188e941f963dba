//! Exact posteriors used as ground truth: linear-Gaussian conditioning, enumeration of
//! small discrete joints, and the mean-field reverse-KL fixed point for Gaussian targets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::families::{bernoulli_log_prob, normal_log_pdf, HALF_LN_2PI};
use crate::favi::{JointSample, Simulator};
use crate::reverse_kl::TractableJoint;
use crate::tape::{sigmoid, ParamGraph, Tape, Var};
use crate::tensor::Tensor;

fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Singular(what));
    }
    m.clone().cholesky().map(|c| c.l()).ok_or(Error::Singular(what))
}

fn to_matrix(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.first().map_or(0, |r| r.len()), |i, j| rows[i][j])
}

/// Gaussian with dense covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn sd(&self, i: usize) -> f64 {
        self.cov[(i, i)].sqrt()
    }

    /// Marginal over the leading `k` coordinates.
    pub fn leading(&self, k: usize) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.rows(0, k).into_owned(),
            cov: self.cov.view((0, 0), (k, k)).into_owned(),
        }
    }
}

/// `u = (z, ξ) ~ N(m, S)`, `x = H u + b + N(0, R)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    latent_dim: usize,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    observation: DMatrix<f64>,
    offset: DVector<f64>,
    noise_cov: DMatrix<f64>,
    prior_factor: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        latent_dim: usize,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        observation: DMatrix<f64>,
        offset: DVector<f64>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let u = prior_mean.len();
        let m = offset.len();
        if latent_dim == 0 || latent_dim > u || m == 0 {
            return Err(Error::InvalidArgument("latent block must be a non-empty prefix".into()));
        }
        if prior_cov.shape() != (u, u) || observation.shape() != (m, u) || noise_cov.shape() != (m, m) {
            return Err(Error::shape(
                "linear_gaussian_model",
                &[u, u, m, u, m, m],
                &[
                    prior_cov.nrows(),
                    prior_cov.ncols(),
                    observation.nrows(),
                    observation.ncols(),
                    noise_cov.nrows(),
                    noise_cov.ncols(),
                ],
            ));
        }
        let prior_factor = cholesky(&prior_cov, "prior covariance")?;
        let noise_factor = cholesky(&noise_cov, "noise covariance")?;
        Ok(Self {
            latent_dim,
            prior_mean,
            prior_cov,
            observation,
            offset,
            noise_cov,
            prior_factor,
            noise_factor,
        })
    }

    /// `z ~ N(0, 1)`, `x = z + N(0, 1)`.
    pub fn conjugate() -> Self {
        Self::new(
            1,
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .expect("valid model")
    }

    /// `z ~ N(0, 1)`, `ξ = z + N(0, 1)`, `x = ξ + N(0, 1)`; `z` is the latent, `ξ` the nuisance.
    pub fn chain() -> Self {
        Self::new(
            1,
            DVector::zeros(2),
            to_matrix(&[&[1.0, 1.0], &[1.0, 2.0]]),
            to_matrix(&[&[0.0, 1.0]]),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .expect("valid model")
    }

    /// Two latents whose posterior covariance is `[[1, ρ], [ρ, 1]]` for every `x`:
    /// prior `N(0, 2C)` and `x = A z + N(0, I)` with `AᵀA = C⁻¹ / 2`.
    pub fn correlated_pair(rho: f64) -> Result<Self> {
        let c = to_matrix(&[&[1.0, rho], &[rho, 1.0]]);
        let c_inv = c.clone().try_inverse().ok_or(Error::Singular("target covariance"))?;
        let l = cholesky(&(c_inv * 0.5), "target precision")?;
        Self::new(
            2,
            DVector::zeros(2),
            c * 2.0,
            l.transpose(),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn nuisance_dim(&self) -> usize {
        self.prior_mean.len() - self.latent_dim
    }

    pub fn observation_dim(&self) -> usize {
        self.offset.len()
    }

    /// Exact `p(z, ξ | x)` by joint-covariance conditioning.
    pub fn gaussian_posterior(&self, x: &[f64]) -> Result<GaussianBelief> {
        if x.len() != self.observation_dim() {
            return Err(Error::shape(
                "gaussian_posterior",
                &[self.observation_dim()],
                &[x.len()],
            ));
        }
        let h = &self.observation;
        let s = &self.prior_cov;
        let cross = s * h.transpose();
        let evidence_cov = h * &cross + &self.noise_cov;
        let chol = evidence_cov.cholesky().ok_or(Error::Singular("evidence covariance"))?;
        let resid = DVector::from_column_slice(x) - h * &self.prior_mean - &self.offset;
        let mean = &self.prior_mean + &cross * chol.solve(&resid);
        let cov = s - &cross * chol.solve(&cross.transpose());
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianBelief { mean, cov })
    }

    /// Exact `p(z | x)`, the nuisance block integrated out.
    pub fn latent_posterior(&self, x: &[f64]) -> Result<GaussianBelief> {
        Ok(self.gaussian_posterior(x)?.leading(self.latent_dim))
    }

    /// The same `p(z, x)` written without `ξ`: `x | z` absorbs the conditional spread of `ξ`.
    pub fn marginalized(&self) -> Result<Self> {
        let k = self.latent_dim;
        let u = self.prior_mean.len();
        let szz = self.prior_cov.view((0, 0), (k, k)).into_owned();
        let suz = self.prior_cov.view((0, 0), (u, k)).into_owned();
        let szz_inv = szz.clone().try_inverse().ok_or(Error::Singular("latent prior"))?;
        // E[u | z] = m + S_uz S_zz⁻¹ (z − m_z) = G z + c
        let gain = &suz * &szz_inv;
        let shift = &self.prior_mean - &gain * self.prior_mean.rows(0, k);
        let cond_cov = &self.prior_cov - &gain * suz.transpose();
        let h = &self.observation;
        let noise = h * &cond_cov * h.transpose() + &self.noise_cov;
        let noise = (&noise + noise.transpose()) * 0.5;
        Self::new(
            k,
            self.prior_mean.rows(0, k).into_owned(),
            szz,
            h * &gain,
            h * shift + &self.offset,
            noise,
        )
    }

    /// Draws `(u, x)` as flat vectors.
    pub fn draw_full<R: Rng + ?Sized>(&self, rng: &mut R) -> (DVector<f64>, DVector<f64>) {
        let u = self.prior_mean.len();
        let m = self.observation_dim();
        let e = DVector::from_fn(u, |_, _| StandardNormal.sample(rng));
        let latent = &self.prior_mean + &self.prior_factor * e;
        let n = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        let x = &self.observation * &latent + &self.offset + &self.noise_factor * n;
        (latent, x)
    }

    fn log_det(factor: &DMatrix<f64>) -> f64 {
        2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

impl Simulator for LinearGaussianModel {
    type Sample = JointSample;

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
        let (u, x) = self.draw_full(rng);
        let k = self.latent_dim;
        Ok(JointSample {
            z: u.as_slice()[..k].to_vec(),
            xi: (self.nuisance_dim() > 0).then(|| u.as_slice()[k..].to_vec()),
            x: x.as_slice().to_vec(),
        })
    }
}

/// Records `−½‖(v − mean) L⁻ᵀ‖² − ½ log|Σ| − (d/2) log 2π` per row, with `Σ = L Lᵀ`.
fn mvn_log_pdf_rows(tape: &mut Tape, v: Var, factor: &DMatrix<f64>) -> Result<Var> {
    let d = factor.nrows();
    let inv = factor
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("covariance factor"))?
        .transpose();
    let whiten = Tensor::new(&[d, d], (0..d * d).map(|i| inv[(i / d, i % d)]).collect())?;
    let w = tape.constant(whiten)?;
    let white = tape.matmul(v, w)?;
    let sq = tape.square(white)?;
    let s = tape.sum_cols(sq)?;
    let half = tape.scale(s, -0.5)?;
    tape.add_scalar(
        half,
        -0.5 * LinearGaussianModel::log_det(factor) - d as f64 * HALF_LN_2PI,
    )
}

fn matrix_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let (r, c) = m.shape();
    Tensor::new(&[r, c], (0..r * c).map(|i| m[(i / c, i % c)]).collect())
}

impl TractableJoint for LinearGaussianModel {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn observation_dim(&self) -> usize {
        self.offset.len()
    }

    fn log_joint_on(&self, tape: &mut Tape, x: &Tensor, z: Var) -> Result<Var> {
        if self.nuisance_dim() > 0 {
            return Err(Error::InvalidArgument(
                "log p(x, z) needs the nuisance block integrated out; use marginalized()".into(),
            ));
        }
        let neg_mean = Tensor::vector(self.prior_mean.iter().map(|v| -v).collect());
        let nm = tape.constant(neg_mean)?;
        let centered = tape.add_bias(z, nm)?;
        let prior = mvn_log_pdf_rows(tape, centered, &self.prior_factor)?;
        let ht = tape.constant(matrix_tensor(&self.observation.transpose())?)?;
        let b = tape.constant(Tensor::vector(self.offset.iter().copied().collect()))?;
        let pred = tape.affine(z, ht, b)?;
        let xv = tape.constant(x.clone())?;
        let resid = tape.sub(xv, pred)?;
        let lik = mvn_log_pdf_rows(tape, resid, &self.noise_factor)?;
        tape.add(prior, lik)
    }
}

/// Per-coordinate variances `1 / (Σ⁻¹)_ii` of the mean-field reverse-KL optimum for `N(·, Σ)`.
pub fn mean_field_reverse_kl_gaussian(cov: &DMatrix<f64>) -> Result<Vec<f64>> {
    let l = cholesky(cov, "covariance")?;
    let inv = nalgebra::Cholesky::new(l.clone() * l.transpose())
        .ok_or(Error::Singular("covariance"))?
        .inverse();
    Ok(inv.diagonal().iter().map(|p| 1.0 / p).collect())
}

/// Total variation between two univariate Gaussians by trapezoid quadrature.
pub fn gaussian_tv(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    let lo = (m1 - 12.0 * s1).min(m2 - 12.0 * s2);
    let hi = (m1 + 12.0 * s1).max(m2 + 12.0 * s2);
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let f = |z: f64| (normal_log_pdf(z, m1, s1).exp() - normal_log_pdf(z, m2, s2).exp()).abs();
    let interior: f64 = (1..n).map(|i| f(lo + i as f64 * h)).sum();
    0.5 * h * (interior + 0.5 * (f(lo) + f(hi)))
}

/// Explicit probability table over `z ∈ {0,1}^bits`, `ξ ∈ {0..n_xi}`, `x ∈ {0..n_x}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    z_bits: usize,
    n_xi: usize,
    n_x: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    /// `table[(z · n_xi + ξ) · n_x + x]`; must be non-negative and sum to one.
    pub fn new(z_bits: usize, n_xi: usize, n_x: usize, table: Vec<f64>) -> Result<Self> {
        if z_bits == 0 || z_bits > 16 || n_xi == 0 || n_x == 0 {
            return Err(Error::InvalidArgument("discrete joint needs positive sizes".into()));
        }
        let cells = (1usize << z_bits) * n_xi * n_x;
        if table.len() != cells {
            return Err(Error::shape("discrete_joint", &[cells], &[table.len()]));
        }
        if table.iter().any(|&p| !(p >= 0.0)) || (table.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(
                "probability table must be non-negative and sum to 1".into(),
            ));
        }
        Ok(Self {
            z_bits,
            n_xi,
            n_x,
            table,
        })
    }

    /// Table drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(z_bits: usize, n_xi: usize, n_x: usize, rng: &mut R) -> Result<Self> {
        let cells = (1usize << z_bits) * n_xi * n_x;
        let raw: Vec<f64> = (0..cells).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        let mut table: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let drift: f64 = 1.0 - table.iter().sum::<f64>();
        table[0] += drift;
        Self::new(z_bits, n_xi, n_x, table)
    }

    /// Two fair bits and `x = z₁ XOR z₂`, flipped with probability `noise`.
    pub fn xor(noise: f64) -> Self {
        let mut table = vec![0.0; 8];
        for z in 0..4usize {
            let parity = (z & 1) ^ (z >> 1);
            for x in 0..2 {
                table[z * 2 + x] = 0.25 * if x == parity { 1.0 - noise } else { noise };
            }
        }
        Self::new(2, 1, 2, table).expect("valid table")
    }

    /// `p(z, x) = p(z) p(x)` over one bit.
    pub fn independent(p_z1: f64, p_x: &[f64]) -> Result<Self> {
        let mut table = Vec::with_capacity(2 * p_x.len());
        for pz in [1.0 - p_z1, p_z1] {
            table.extend(p_x.iter().map(|px| pz * px));
        }
        Self::new(1, 1, p_x.len(), table)
    }

    pub fn z_bits(&self) -> usize {
        self.z_bits
    }

    pub fn z_states(&self) -> usize {
        1 << self.z_bits
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_xi(&self) -> usize {
        self.n_xi
    }

    pub fn prob(&self, z: usize, xi: usize, x: usize) -> f64 {
        self.table[(z * self.n_xi + xi) * self.n_x + x]
    }

    pub fn bits(&self, z: usize) -> Vec<f64> {
        (0..self.z_bits).map(|k| ((z >> k) & 1) as f64).collect()
    }

    pub fn p_x(&self, x: usize) -> f64 {
        (0..self.z_states())
            .flat_map(|z| (0..self.n_xi).map(move |xi| (z, xi)))
            .map(|(z, xi)| self.prob(z, xi, x))
            .sum()
    }

    /// Exact `p(z | x)` over all `2^bits` states, `ξ` summed out.
    pub fn enumerate_posterior(&self, x: usize) -> Result<Vec<f64>> {
        if x >= self.n_x {
            return Err(Error::InvalidArgument(format!("x = {x} outside 0..{}", self.n_x)));
        }
        let px = self.p_x(x);
        if px <= 0.0 {
            return Err(Error::InvalidArgument(format!("x = {x} has zero probability")));
        }
        Ok((0..self.z_states())
            .map(|z| (0..self.n_xi).map(|xi| self.prob(z, xi, x)).sum::<f64>() / px)
            .collect())
    }

    /// `p(z_k = 1 | x)` for every coordinate.
    pub fn marginals(&self, x: usize) -> Result<Vec<f64>> {
        let post = self.enumerate_posterior(x)?;
        Ok((0..self.z_bits)
            .map(|k| {
                post.iter()
                    .enumerate()
                    .filter(|(z, _)| (z >> k) & 1 == 1)
                    .map(|(_, p)| p)
                    .sum()
            })
            .collect())
    }

    /// `H(z | x)` in nats.
    pub fn conditional_entropy(&self) -> f64 {
        (0..self.n_x)
            .filter_map(|x| self.enumerate_posterior(x).ok().map(|post| (x, post)))
            .map(|(x, post)| self.p_x(x) * -post.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum()
    }

    /// Expected loss `−E_p[log q(z | x)]` of a factorized table `q[x][k] = q(z_k = 1 | x)`.
    pub fn factorized_loss(&self, q: &[Vec<f64>]) -> f64 {
        let mut loss = 0.0;
        for z in 0..self.z_states() {
            for xi in 0..self.n_xi {
                for x in 0..self.n_x {
                    let p = self.prob(z, xi, x);
                    if p == 0.0 {
                        continue;
                    }
                    let lq: f64 = (0..self.z_bits)
                        .map(|k| {
                            if (z >> k) & 1 == 1 {
                                q[x][k].ln()
                            } else {
                                (1.0 - q[x][k]).ln()
                            }
                        })
                        .sum();
                    loss -= p * lq;
                }
            }
        }
        loss
    }

    /// One row per cell: `z, xi, x, p`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["z", "xi", "x", "p"])?;
        for z in 0..self.z_states() {
            for xi in 0..self.n_xi {
                for x in 0..self.n_x {
                    w.write_record([
                        z.to_string(),
                        xi.to_string(),
                        x.to_string(),
                        format!("{:.17e}", self.prob(z, xi, x)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl Simulator for DiscreteJoint {
    type Sample = JointSample;

    /// `z` as its bits, `x` (and `ξ` when present) one-hot.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<JointSample> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = self.table.len() - 1;
        for (i, &p) in self.table.iter().enumerate() {
            acc += p;
            if u < acc {
                cell = i;
                break;
            }
        }
        let x = cell % self.n_x;
        let xi = (cell / self.n_x) % self.n_xi;
        let z = cell / (self.n_x * self.n_xi);
        let one_hot = |i: usize, n: usize| (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        Ok(JointSample {
            z: self.bits(z),
            xi: (self.n_xi > 1).then(|| one_hot(xi, self.n_xi)),
            x: one_hot(x, self.n_x),
        })
    }
}

/// Minimizes the exact expected FAVI loss over factorized tables `q(z_k = 1 | x)` by
/// Newton's method on the logits; returns `q[x][k]` (`0.5` where `p(x) = 0`).
pub fn tabular_fit(joint: &DiscreteJoint) -> Result<Vec<Vec<f64>>> {
    let (bits, n_x) = (joint.z_bits, joint.n_x);
    let mut graph = ParamGraph::new();
    let theta = graph.add("logits", Tensor::zeros(&[n_x, bits]))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for z in 0..joint.z_states() {
        for x in 0..n_x {
            let w: f64 = (0..joint.n_xi).map(|xi| joint.prob(z, xi, x)).sum();
            if w > 0.0 {
                rows.push(x);
                labels.extend(joint.bits(z));
                weights.push(w);
            }
        }
    }
    let labels = Tensor::new(&[rows.len(), bits], labels)?;
    let weights = Tensor::new(&[rows.len(), 1], weights)?;
    let p_x: Vec<f64> = (0..n_x).map(|x| joint.p_x(x)).collect();
    for _ in 0..100 {
        let mut tape = Tape::new();
        let th = tape.param(&graph, theta)?;
        let per_cell = tape.gather_rows(th, &rows)?;
        let lp = bernoulli_log_prob(&mut tape, per_cell, &labels)?;
        let w = tape.constant(weights.clone())?;
        let weighted = tape.mul(lp, w)?;
        let total = tape.sum(weighted)?;
        let loss = tape.scale(total, -1.0)?;
        let grad = tape
            .gradients(loss, &Tensor::scalar(1.0), &graph)?
            .remove(theta.index());
        let values = graph.value_mut(theta).data_mut();
        let mut largest = 0.0f64;
        for (i, (t, g)) in values.iter_mut().zip(grad.data()).enumerate() {
            let s = sigmoid(*t);
            let h = p_x[i / bits] * s * (1.0 - s);
            if h > 0.0 {
                *t -= g / h;
                largest = largest.max(g.abs());
            }
        }
        if largest < 1e-15 {
            break;
        }
    }
    let t = graph.value(theta);
    Ok((0..n_x)
        .map(|x| {
            if p_x[x] > 0.0 {
                t.row(x).iter().map(|&l| sigmoid(l)).collect()
            } else {
                vec![0.5; bits]
            }
        })
        .collect())
}

/// Distance between a fitted factorized table and the exact marginals for one `(x, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalRow {
    pub x: usize,
    pub coord: usize,
    pub exact: f64,
    pub fitted: f64,
    /// Total variation between `Bernoulli(exact)` and `Bernoulli(fitted)`.
    pub tv: f64,
}

/// Per-`x`, per-coordinate comparison of `fitted[x][k] = q(z_k = 1 | x)` with the exact marginals.
pub fn theorem1_report(joint: &DiscreteJoint, fitted: &[Vec<f64>]) -> Result<Vec<MarginalRow>> {
    if fitted.len() != joint.n_x || fitted.iter().any(|r| r.len() != joint.z_bits) {
        return Err(Error::shape(
            "theorem1_report",
            &[joint.n_x, joint.z_bits],
            &[fitted.len()],
        ));
    }
    let mut rows = Vec::new();
    for (x, q) in fitted.iter().enumerate() {
        if joint.p_x(x) == 0.0 {
            continue;
        }
        for (coord, (&exact, &fit)) in joint.marginals(x)?.iter().zip(q).enumerate() {
            rows.push(MarginalRow {
                x,
                coord,
                exact,
                fitted: fit,
                tv: (exact - fit).abs(),
            });
        }
    }
    Ok(rows)
}

pub fn max_tv(rows: &[MarginalRow]) -> f64 {
    rows.iter().map(|r| r.tv).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn conjugate_posterior() {
        let post = LinearGaussianModel::conjugate().gaussian_posterior(&[2.0]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_observation_matrix_returns_prior() {
        let prior_cov = to_matrix(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let m = LinearGaussianModel::new(
            1,
            DVector::from_column_slice(&[1.0, -1.0]),
            prior_cov.clone(),
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let post = m.gaussian_posterior(&[7.0]).unwrap();
        assert_eq!(post.mean.as_slice(), &[1.0, -1.0]);
        assert!((post.cov - prior_cov).amax() < 1e-15);
    }

    #[test]
    fn chain_marginal_is_analytic() {
        // cov(z, x) = 1, var(x) = 3: p(z | x) = N(x / 3, 2 / 3).
        let post = LinearGaussianModel::chain().latent_posterior(&[3.0]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-14);
        assert!((post.cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
        let marg = LinearGaussianModel::chain().marginalized().unwrap();
        assert_eq!(marg.nuisance_dim(), 0);
        let post2 = marg.latent_posterior(&[3.0]).unwrap();
        assert!((post2.mean[0] - 1.0).abs() < 1e-14);
        assert!((post2.cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn chain_posterior_matches_rejection_sampling() {
        let model = LinearGaussianModel::chain();
        let exact = model.gaussian_posterior(&[3.0]).unwrap();
        let mut rng = substream(0, "sim");
        let mut zs = Vec::new();
        let mut xis = Vec::new();
        for _ in 0..1_000_000 {
            let (u, x) = model.draw_full(&mut rng);
            if (x[0] - 3.0).abs() < 0.01 {
                zs.push(u[0]);
                xis.push(u[1]);
            }
        }
        assert!(zs.len() > 500);
        for (i, draws) in [zs, xis].iter().enumerate() {
            let m = crate::stats::mean(draws);
            let se = crate::stats::standard_error(draws);
            assert!(
                (m - exact.mean[i]).abs() < 3.0 * se,
                "coord {i}: {m} vs {}",
                exact.mean[i]
            );
            let v = crate::stats::variance(draws);
            let v_se = exact.cov[(i, i)] * (2.0 / (draws.len() - 1) as f64).sqrt();
            assert!((v - exact.cov[(i, i)]).abs() < 3.0 * v_se, "coord {i}: var {v}");
        }
    }

    #[test]
    fn correlated_pair_has_fixed_posterior() {
        let m = LinearGaussianModel::correlated_pair(0.9).unwrap();
        for x in [[0.0, 0.0], [1.5, -2.0]] {
            let post = m.gaussian_posterior(&x).unwrap();
            assert!((post.cov[(0, 0)] - 1.0).abs() < 1e-12);
            assert!((post.cov[(0, 1)] - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_inputs_are_rejected() {
        let bad = to_matrix(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(mean_field_reverse_kl_gaussian(&bad), Err(Error::Singular(_))));
        assert!(LinearGaussianModel::new(
            1,
            DVector::zeros(2),
            bad,
            DMatrix::zeros(1, 2),
            DVector::zeros(1),
            DMatrix::identity(1, 1)
        )
        .is_err());
    }

    #[test]
    fn mean_field_fixed_point() {
        let v = mean_field_reverse_kl_gaussian(&to_matrix(&[&[1.0, 0.9], &[0.9, 1.0]])).unwrap();
        assert!((v[0] - 0.19).abs() < 1e-12 && (v[1] - 0.19).abs() < 1e-12);
        let v = mean_field_reverse_kl_gaussian(&to_matrix(&[&[1.0, 0.0], &[0.0, 4.0]])).unwrap();
        assert_eq!(v, vec![1.0, 4.0]);
    }

    #[test]
    fn log_joint_matches_closed_form() {
        let m = LinearGaussianModel::correlated_pair(0.9).unwrap();
        let x = Tensor::new(&[1, 2], vec![0.4, -1.1]).unwrap();
        let z = [0.3, 0.2];
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(&[1, 2], z.to_vec()).unwrap()).unwrap();
        let lp = m.log_joint_on(&mut tape, &x, zv).unwrap();
        let got = tape.value(lp).item();
        let zv = DVector::from_column_slice(&z);
        let prior_prec = m.prior_cov.clone().try_inverse().unwrap();
        let r = DVector::from_column_slice(x.data()) - &m.observation * &zv;
        let expected = -0.5 * (zv.transpose() * prior_prec * &zv)[0]
            - 0.5 * m.prior_cov.determinant().ln()
            - 2.0 * HALF_LN_2PI
            - 0.5 * r.norm_squared()
            - 2.0 * HALF_LN_2PI;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        let z1 = tape.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap()).unwrap();
        let x1 = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        assert!(LinearGaussianModel::chain().log_joint_on(&mut tape, &x1, z1).is_err());
    }

    #[test]
    fn independent_joint_returns_prior() {
        let j = DiscreteJoint::independent(0.3, &[0.2, 0.5, 0.3]).unwrap();
        for x in 0..3 {
            let m = j.marginals(x).unwrap();
            assert!((m[0] - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn xor_table() {
        let j = DiscreteJoint::xor(0.1);
        // p(z | x = 1) puts 0.45 on each odd-parity state and 0.05 on the others.
        let post = j.enumerate_posterior(1).unwrap();
        let expected = [0.05, 0.45, 0.45, 0.05];
        for (p, e) in post.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert_eq!(j.marginals(1).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn deterministic_joint_gives_point_mass() {
        let j = DiscreteJoint::new(1, 1, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert_eq!(j.enumerate_posterior(0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(j.enumerate_posterior(1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(j.conditional_entropy(), 0.0);
        let zero_x = DiscreteJoint::new(1, 1, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(zero_x.enumerate_posterior(1).is_err());
    }

    #[test]
    fn nuisance_is_summed_out() {
        let mut rng = substream(4, "tables");
        let j = DiscreteJoint::random(2, 3, 4, &mut rng).unwrap();
        for x in 0..4 {
            let post = j.enumerate_posterior(x).unwrap();
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let s = j.draw(&mut rng).unwrap();
        assert_eq!(s.xi.as_ref().map(|v| v.len()), Some(3));
        assert_eq!(s.x.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn tabular_fit_recovers_marginals() {
        let mut rng = substream(5, "tables");
        for bits in 1..=3 {
            let j = DiscreteJoint::random(bits, 1, 4, &mut rng).unwrap();
            let q = tabular_fit(&j).unwrap();
            assert!(max_tv(&theorem1_report(&j, &q).unwrap()) < 1e-8);
        }
        let j = DiscreteJoint::xor(0.1);
        let exact: Vec<Vec<f64>> = (0..2).map(|x| j.marginals(x).unwrap()).collect();
        assert_eq!(max_tv(&theorem1_report(&j, &exact).unwrap()), 0.0);
    }

    #[test]
    fn gaussian_tv_limits() {
        assert!(gaussian_tv(0.0, 1.0, 0.0, 1.0) < 1e-12);
        assert!((gaussian_tv(0.0, 1.0, 100.0, 1.0) - 1.0).abs() < 1e-9);
        // TV of unit Gaussians one apart is 2Φ(½) − 1.
        let expected = 2.0 * crate::families::normal_cdf(0.5) - 1.0;
        // The kink where the densities cross limits the quadrature to O(h²).
        assert!((gaussian_tv(0.0, 1.0, 1.0, 1.0) - expected).abs() < 1e-5);
    }

    #[test]
    fn csv_dump_has_one_row_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("xor.csv");
        DiscreteJoint::xor(0.1).write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn factorized_loss_is_at_least_conditional_entropy(
            seed in 0u64..1000,
            bits in 1usize..=3,
            n_x in 1usize..=4,
            q in proptest::collection::vec(0.01f64..0.99, 12),
        ) {
            let mut rng = substream(seed, "tables");
            let j = DiscreteJoint::random(bits, 1, n_x, &mut rng).unwrap();
            let table: Vec<Vec<f64>> = (0..n_x).map(|x| q[x * 3..x * 3 + bits].to_vec()).collect();
            prop_assert!(j.factorized_loss(&table) >= j.conditional_entropy() - 1e-12);
            let best = tabular_fit(&j).unwrap();
            prop_assert!(j.factorized_loss(&table) >= j.factorized_loss(&best) - 1e-12);
        }

        #[test]
        fn posterior_pmfs_normalize(seed in 0u64..1000, bits in 1usize..=3, n_x in 1usize..=4) {
            let mut rng = substream(seed, "tables");
            let j = DiscreteJoint::random(bits, 2, n_x, &mut rng).unwrap();
            for x in 0..n_x {
                let s: f64 = j.enumerate_posterior(x).unwrap().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
