//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one forward pass as a list of primitive ops. Parameters live in a
//! [`ParamGraph`]; the tape copies their current values in when they are first used, and
//! [`ParamGraph::backward`] writes the resulting gradients back, one tensor per parameter.
//!
//! Tensors on the tape are treated as `[rows, cols]` matrices (trailing dimensions are
//! flattened into `cols`), except for the causal convolution which reads `[batch, len, chan]`.
//! Every op checks its output for NaN/Inf and fails with [`Error::NonFinite`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter tensor inside a [`ParamGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors together with the gradients of the last backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGraph {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Option<Vec<Tensor>>,
}

impl ParamGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        self.grads = None;
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> Option<&[Tensor]> {
        self.grads.as_deref()
    }

    pub fn clear_grads(&mut self) {
        self.grads = None;
    }

    /// Installs externally accumulated gradients (e.g. summed over several tapes).
    pub fn set_grads(&mut self, grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(Error::shape("set_grads", &[self.values.len()], &[grads.len()]));
        }
        for (g, v) in grads.iter().zip(&self.values) {
            if g.shape() != v.shape() {
                return Err(Error::shape("set_grads", v.shape(), g.shape()));
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Back-propagates `seed` (shaped like `out`) through `tape` and stores the gradients.
    pub fn backward(&mut self, tape: &Tape, out: Var, seed: &Tensor) -> Result<()> {
        let grads = tape.gradients(out, seed, self)?;
        self.grads = Some(grads);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// All parameter scalars concatenated in id order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("set_flat_values", &[self.num_scalars()], &[flat.len()]));
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flat_grads(&self) -> Option<Vec<f64>> {
        self.grads
            .as_ref()
            .map(|g| g.iter().flat_map(|t| t.data().iter().copied()).collect())
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    Softmax(Var),
    LogSumExp(Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    Reshape(Var),
    CausalConv {
        input: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// Records parameter `id`; repeated calls within one pass return the same handle.
    pub fn param(&mut self, graph: &ParamGraph, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(graph.value(id).clone(), Op::Param(id), "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a));
        let bt = self.value(b);
        let (k2, n) = (bt.rows(), bt.cols());
        if k != k2 {
            return Err(Error::shape("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, bt.data(), false, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// Adds a bias vector of length `cols` to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xt = self.value(x);
        let bt = self.value(bias);
        let c = xt.cols();
        if bt.len() != c {
            return Err(Error::shape("add_bias", &[c], bt.shape()));
        }
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bt.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias")
    }

    /// Dense affine map `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.len() != bt.len() || at.rows() != bt.rows() {
            return Err(Error::shape(name, at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(at.shape(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, name)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, "add_scalar", |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, "clamp", |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(x), "log_softmax")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let mut out = xt.clone();
        for row in out.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Row-wise log-sum-exp with max subtraction; output is `[rows, 1]`.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let data: Vec<f64> = xt.data().chunks(c).map(log_sum_exp).collect();
        let value = Tensor::new(&[xt.rows(), 1], data)?;
        self.push(value, Op::LogSumExp(x), "log_sum_exp")
    }

    /// Row sums; output is `[rows, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let data: Vec<f64> = xt.data().chunks(c).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(&[xt.rows(), 1], data)?;
        self.push(value, Op::SumCols(x), "sum_cols")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat", &[rows], &[self.value(p).rows()]));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        self.push(value, Op::Concat(parts.to_vec()), "concat")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &[c], &[start, end]));
        }
        let data: Vec<f64> = xt
            .data()
            .chunks(c)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = Tensor::new(&[xt.rows(), end - start], data)?;
        self.push(value, Op::SliceCols(x, start, end), "slice_cols")
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= xt.rows() {
                return Err(Error::shape("gather_rows", &[xt.rows()], &[i]));
            }
            data.extend_from_slice(xt.row(i));
        }
        let value = Tensor::new(&[idx.len(), c], data)?;
        self.push(value, Op::GatherRows(x, idx.to_vec()), "gather_rows")
    }

    /// Mean of row segments `offsets[i]..offsets[i+1]`; an empty segment yields a zero row.
    pub fn segment_mean(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.cols();
        if offsets.len() < 2 || offsets.windows(2).any(|w| w[0] > w[1]) || *offsets.last().unwrap() > xt.rows() {
            return Err(Error::InvalidArgument("segment offsets out of range".into()));
        }
        let segs = offsets.len() - 1;
        let mut data = vec![0.0; segs * c];
        for s in 0..segs {
            let (a, b) = (offsets[s], offsets[s + 1]);
            if a == b {
                continue;
            }
            let out = &mut data[s * c..(s + 1) * c];
            for r in a..b {
                for (o, v) in out.iter_mut().zip(xt.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / (b - a) as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(&[segs, c], data)?;
        self.push(value, Op::SegmentMean(x, offsets.to_vec()), "segment_mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// Dilated causal 1-D convolution, channels last.
    ///
    /// `input` is `[batch, len, c_in]`, `weight` is `[taps * c_in, c_out]` and `bias` is
    /// `[c_out]`. Tap `k` reads position `t - (taps - 1 - k) * dilation`, zero-padded on the
    /// left, so the output `[batch, len, c_out]` at `t` never sees inputs after `t`.
    pub fn causal_conv1d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        let it = self.value(input);
        if it.shape().len() != 3 {
            return Err(Error::shape("causal_conv1d", &[0, 0, 0], it.shape()));
        }
        let (b, l, cin) = (it.shape()[0], it.shape()[1], it.shape()[2]);
        let wt = self.value(weight);
        if !wt.rows().is_multiple_of(cin) || dilation == 0 {
            return Err(Error::shape("causal_conv1d", &[cin], wt.shape()));
        }
        let taps = wt.rows() / cin;
        let cout = wt.cols();
        if self.value(bias).len() != cout {
            return Err(Error::shape("causal_conv1d", &[cout], self.value(bias).shape()));
        }
        let cols = im2col(it.data(), b, l, cin, taps, dilation);
        let mut out = vec![0.0; b * l * cout];
        gemm(b * l, taps * cin, cout, &cols, false, wt.data(), false, &mut out, false);
        let bt = self.value(bias).data();
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bt) {
                *o += bb;
            }
        }
        let value = Tensor::new(&[b, l, cout], out)?;
        self.push(
            value,
            Op::CausalConv {
                input,
                weight,
                bias,
                dilation,
            },
            "causal_conv1d",
        )
    }

    /// Reverse sweep from `out`; returns one gradient per parameter of `graph`
    /// (zeros for parameters the pass did not touch).
    pub fn gradients(&self, out: Var, seed: &Tensor, graph: &ParamGraph) -> Result<Vec<Tensor>> {
        if self.nodes.is_empty() || out.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let out_value = self.value(out);
        if seed.len() != out_value.len() {
            return Err(Error::shape("backward", out_value.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed.clone().reshape(out_value.shape())?);
        let mut param_grads: Vec<Tensor> = graph.values().iter().map(|v| Tensor::zeros(v.shape())).collect();

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let pg = param_grads
                        .get_mut(id.0)
                        .ok_or_else(|| Error::InvalidArgument("tape/graph mismatch".into()))?;
                    if pg.len() != g.len() {
                        return Err(Error::shape("backward", pg.shape(), g.shape()));
                    }
                    pg.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let at = self.value(*a);
                    let bt = self.value(*b);
                    let (m, k) = rows_cols(at);
                    let n = bt.cols();
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bt.data(), true, &mut da, false);
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, at.data(), true, g.data(), false, &mut db, false);
                    accumulate(&mut grads, *a, Tensor::new(at.shape(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bt.shape(), db)?);
                }
                Op::AddBias(x, b) => {
                    let bt = self.value(*b);
                    let c = bt.len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::new(bt.shape(), db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |gv, bv| gv * bv);
                    let gb = zip_map(&g, self.value(*a), |gv, av| gv * av);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.map(|v| v * s)),
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Relu(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = zip_map(&g, &node.value, |gv, yv| gv * (1.0 - yv * yv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| gv * sigmoid(xv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = zip_map(&g, &node.value, |gv, yv| gv * yv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| 2.0 * gv * xv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let gx = zip_map(&g, self.value(*x), |gv, xv| if xv < *lo || xv > *hi { 0.0 } else { gv });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let c = node.value.cols();
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv -= yv.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let c = node.value.cols();
                    let mut gx = g.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSumExp(x) => {
                    let xt = self.value(*x);
                    let c = xt.cols();
                    let mut gx = xt.clone();
                    for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                        let lse = node.value.data()[r];
                        let gr = g.data()[r];
                        row.iter_mut().for_each(|v| *v = gr * (*v - lse).exp());
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) => {
                    let xt = self.value(*x);
                    let c = xt.cols();
                    let mut gx = Tensor::zeros(xt.shape());
                    for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                        row.fill(g.data()[r]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let xt = self.value(*x);
                    let gx = Tensor::full(xt.shape(), g.item() / xt.len() as f64);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let pt = self.value(p);
                        let w = pt.cols();
                        let data: Vec<f64> = g
                            .data()
                            .chunks(total)
                            .flat_map(|r| r[off..off + w].iter().copied())
                            .collect();
                        accumulate(&mut grads, p, Tensor::new(pt.shape(), data)?);
                        off += w;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let xt = self.value(*x);
                    let c = xt.cols();
                    let w = end - start;
                    let mut gx = Tensor::zeros(xt.shape());
                    for (r, row) in gx.data_mut().chunks_mut(c).enumerate() {
                        row[*start..*end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let xt = self.value(*x);
                    let c = xt.cols();
                    let mut gx = Tensor::zeros(xt.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                        for (d, v) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentMean(x, offsets) => {
                    let xt = self.value(*x);
                    let c = xt.cols();
                    let mut gx = Tensor::zeros(xt.shape());
                    for s in 0..offsets.len() - 1 {
                        let (a, b) = (offsets[s], offsets[s + 1]);
                        if a == b {
                            continue;
                        }
                        let inv = 1.0 / (b - a) as f64;
                        let gs = &g.data()[s * c..(s + 1) * c];
                        for r in a..b {
                            for (d, v) in gx.data_mut()[r * c..(r + 1) * c].iter_mut().zip(gs) {
                                *d = v * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CausalConv {
                    input,
                    weight,
                    bias,
                    dilation,
                } => {
                    let it = self.value(*input);
                    let wt = self.value(*weight);
                    let (b, l, cin) = (it.shape()[0], it.shape()[1], it.shape()[2]);
                    let taps = wt.rows() / cin;
                    let cout = wt.cols();
                    let cols = im2col(it.data(), b, l, cin, taps, *dilation);
                    let mut dw = vec![0.0; taps * cin * cout];
                    gemm(taps * cin, b * l, cout, &cols, true, g.data(), false, &mut dw, false);
                    let mut db = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut dcols = vec![0.0; b * l * taps * cin];
                    gemm(
                        b * l,
                        cout,
                        taps * cin,
                        g.data(),
                        false,
                        wt.data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let dx = col2im(&dcols, b, l, cin, taps, *dilation);
                    accumulate(&mut grads, *weight, Tensor::new(wt.shape(), dw)?);
                    accumulate(&mut grads, *bias, Tensor::new(self.value(*bias).shape(), db)?);
                    accumulate(&mut grads, *input, Tensor::new(it.shape(), dx)?);
                }
            }
        }
        for (i, g) in param_grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(graph.name(ParamId(i)).to_string()));
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(other.shape(), data).expect("gradient shape")
}

fn im2col(x: &[f64], b: usize, l: usize, cin: usize, taps: usize, dilation: usize) -> Vec<f64> {
    let width = taps * cin;
    let mut cols = vec![0.0; b * l * width];
    for bi in 0..b {
        for t in 0..l {
            let dst = &mut cols[(bi * l + t) * width..(bi * l + t + 1) * width];
            for k in 0..taps {
                let back = (taps - 1 - k) * dilation;
                if back > t {
                    continue;
                }
                let src = (bi * l + t - back) * cin;
                dst[k * cin..(k + 1) * cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], b: usize, l: usize, cin: usize, taps: usize, dilation: usize) -> Vec<f64> {
    let width = taps * cin;
    let mut x = vec![0.0; b * l * cin];
    for bi in 0..b {
        for t in 0..l {
            let src = &cols[(bi * l + t) * width..(bi * l + t + 1) * width];
            for k in 0..taps {
                let back = (taps - 1 - k) * dilation;
                if back > t {
                    continue;
                }
                let dst = (bi * l + t - back) * cin;
                for (d, v) in x[dst..dst + cin].iter_mut().zip(&src[k * cin..(k + 1) * cin]) {
                    *d += v;
                }
            }
        }
    }
    x
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log Σ exp(v)` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
