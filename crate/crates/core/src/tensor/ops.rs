//! Forward kernels (as [`Graph`] methods) and their backward rules.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{BnBatchStats, Graph, Var};
use super::Tensor;
use crate::error::{bail, Result};
use crate::real::{Real, Strided};
use crate::sum::{column_sums, sum};

/// Variance floor shared by every normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Denominator floor of the normalised weighted mean.
const WEIGHT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the graph collects them for the running-average update.
    Train,
    /// Running statistics.
    Eval,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Scale(Var, T),
    Linear { x: Var, w: Var, b: Option<Var> },
    GroupLinear { x: Var, w: Var, b: Option<Var>, groups: usize },
    ContextNorm { x: Var, inv_std: Vec<T> },
    WeightedContextNorm { x: Var, w: Var, mean: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, mode: BnMode },
    MeanPoints(Var),
    WeightedMeanPoints { x: Var, w: Var, denom: Vec<T> },
    MaxLayers { inputs: Vec<Var>, argmax: Vec<u16> },
    SoftmaxPoints(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    SliceAxis0 { x: Var, start: usize },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    TransformPoints { r: Var, t: Var, points: Tensor<T> },
    MaskedDistance { pred: Var, target: Tensor<T>, mask: Tensor<T> },
    BceLogits { logits: Var, target: Tensor<T>, weight: Tensor<T> },
    Rodrigues(Var),
}

/// Strides of `rhs` aligned to `lhs` (0 on broadcast dims), or `None` when the
/// shapes are identical.
fn broadcast_strides(lhs: &[usize], rhs: &[usize]) -> Result<Option<Vec<usize>>> {
    if lhs == rhs {
        return Ok(None);
    }
    if rhs.len() > lhs.len() {
        bail!(Shape, "cannot broadcast {:?} onto {:?}", rhs, lhs);
    }
    let pad = lhs.len() - rhs.len();
    let mut dims = vec![1usize; pad];
    dims.extend_from_slice(rhs);
    let mut strides = vec![0usize; lhs.len()];
    let mut acc = 1;
    for d in (0..lhs.len()).rev() {
        if dims[d] == lhs[d] {
            strides[d] = if dims[d] == 1 { 0 } else { acc };
        } else if dims[d] == 1 {
            strides[d] = 0;
        } else {
            bail!(Shape, "cannot broadcast {:?} onto {:?}", rhs, lhs);
        }
        acc *= dims[d];
    }
    Ok(Some(strides))
}

/// Calls `f(lhs_index, rhs_index)` over every element of `lhs`.
fn for_each_bcast(lhs: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = lhs.len();
    let numel: usize = lhs.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..numel {
        f(i, off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < lhs[d] {
                break;
            }
            off -= strides[d] * lhs[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let strides = broadcast_strides(av.shape(), bv.shape())?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let data: Vec<T> = match &strides {
            None => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Some(st) => {
                let mut out = vec![T::zero(); av.numel()];
                let (ad, bd) = (av.data(), bv.data());
                for_each_bcast(av.shape(), st, |i, j| out[i] = f(ad[i], bd[j]));
                out
            }
        };
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, &[a, b], || match kind {
            BinKind::Add => Op::Add(a, b),
            BinKind::Sub => Op::Sub(a, b),
            BinKind::Mul => Op::Mul(a, b),
        }))
    }

    /// `a + b`, with `b` broadcast over size-1 (or missing leading) dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: impl FnOnce() -> Op<T>) -> Var {
        let value = self.value(x).map(f);
        self.push(value, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, || Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, || Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), || Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, |v| v * c, || Op::Scale(x, c))
    }

    /// Shared per-row affine map: `x[..., cin] · w[cin, cout] + b[cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (cin, cout) = match wv.shape() {
            &[i, o] => (i, o),
            s => bail!(Shape, "linear weight must be 2-D, got {:?}", s),
        };
        if xv.shape().last() != Some(&cin) {
            bail!(Shape, "linear input {:?} does not end in {}", xv.shape(), cin);
        }
        let rows = xv.numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(rows, cin, cout, Strided::row_major(xv.data(), cin), Strided::row_major(wv.data(), cout), &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != cout {
                bail!(Shape, "linear bias has {} elements, expected {}", bv.numel(), cout);
            }
            for row in out.chunks_exact_mut(cout) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, &inputs, || Op::Linear { x, w, b }))
    }

    /// Channels split into `groups` contiguous blocks, each with its own square map.
    /// `w` is `[groups, C/groups, C/groups]`, `b` is `[C]`.
    pub fn group_linear(&mut self, x: Var, w: Var, b: Option<Var>, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let channels = *xv.shape().last().unwrap_or(&0);
        if groups == 0 || channels % groups != 0 {
            bail!(InvalidArgument, "{} channels not divisible into {} groups", channels, groups);
        }
        let c = channels / groups;
        if wv.shape() != [groups, c, c] {
            bail!(Shape, "group weight {:?}, expected {:?}", wv.shape(), [groups, c, c]);
        }
        let rows = xv.numel() / channels;
        let mut out = vec![T::zero(); rows * channels];
        for g in 0..groups {
            let a = Strided { data: xv.data(), offset: g * c, row_stride: channels, col_stride: 1 };
            let bm = Strided { data: wv.data(), offset: g * c * c, row_stride: c, col_stride: 1 };
            T::gemm_into(rows, c, c, a, bm, &mut out, g * c, channels, false);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != channels {
                bail!(Shape, "group bias has {} elements, expected {}", bv.numel(), channels);
            }
            for row in out.chunks_exact_mut(channels) {
                row.iter_mut().zip(bv.data()).for_each(|(o, &bb)| *o += bb);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, &inputs, || Op::GroupLinear { x, w, b, groups }))
    }

    /// Per instance and channel: standardise across the N points.
    pub fn context_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, n, c) = xv.dims3()?;
        if n < 2 {
            bail!(InvalidArgument, "context norm needs at least 2 points, got {}", n);
        }
        let d = xv.data();
        let inv_n = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); b * c];
        for bi in 0..b {
            let block = &d[bi * n * c..(bi + 1) * n * c];
            let mut mean = column_sums(n, c, |i, buf| buf.copy_from_slice(&block[i * c..(i + 1) * c]));
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let var = column_sums(n, c, |i, buf| {
                for ((s, &v), &m) in buf.iter_mut().zip(&block[i * c..(i + 1) * c]).zip(&mean) {
                    *s = (v - m) * (v - m);
                }
            });
            let s = &mut inv_std[bi * c..(bi + 1) * c];
            for (si, v) in s.iter_mut().zip(&var) {
                *si = T::one() / (*v * inv_n + T::of(NORM_EPS)).sqrt();
            }
            let ob = &mut out[bi * n * c..(bi + 1) * n * c];
            for (orow, row) in ob.chunks_exact_mut(c).zip(block.chunks_exact(c)) {
                for j in 0..c {
                    orow[j] = (row[j] - mean[j]) * s[j];
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, &[x], || Op::ContextNorm { x, inv_std }))
    }

    /// Context normalisation with per-point weights `w` (`[B, N, 1]`, summing to 1
    /// per instance): weighted mean and variance over the points.
    pub fn weighted_context_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, n, c) = xv.dims3()?;
        if wv.shape() != [b, n, 1] {
            bail!(Shape, "weights {:?} do not match features {:?}", wv.shape(), xv.shape());
        }
        let (d, wd) = (xv.data(), wv.data());
        for bi in 0..b {
            let ws = &wd[bi * n..(bi + 1) * n];
            if ws.iter().any(|v| !(*v >= T::zero())) {
                bail!(InvalidArgument, "weighted context norm needs non-negative weights");
            }
            let total: f64 = ws.iter().map(|v| v.f64()).sum();
            if (total - 1.0).abs() > 1e-3 {
                bail!(InvalidArgument, "weights of instance {} sum to {}, expected 1", bi, total);
            }
        }
        let mut out = vec![T::zero(); d.len()];
        let mut means = vec![T::zero(); b * c];
        let mut inv_std = vec![T::zero(); b * c];
        for bi in 0..b {
            let block = &d[bi * n * c..(bi + 1) * n * c];
            let ws = &wd[bi * n..(bi + 1) * n];
            let mean = &mut means[bi * c..(bi + 1) * c];
            mean.copy_from_slice(&column_sums(n, c, |i, buf| {
                for (s, &v) in buf.iter_mut().zip(&block[i * c..(i + 1) * c]) {
                    *s = ws[i] * v;
                }
            }));
            let var = column_sums(n, c, |i, buf| {
                for ((s, &v), &m) in buf.iter_mut().zip(&block[i * c..(i + 1) * c]).zip(mean.iter()) {
                    *s = ws[i] * (v - m) * (v - m);
                }
            });
            let s = &mut inv_std[bi * c..(bi + 1) * c];
            for (si, v) in s.iter_mut().zip(&var) {
                *si = T::one() / (*v + T::of(NORM_EPS)).sqrt();
            }
            let ob = &mut out[bi * n * c..(bi + 1) * n * c];
            for (orow, row) in ob.chunks_exact_mut(c).zip(block.chunks_exact(c)) {
                for j in 0..c {
                    orow[j] = (row[j] - mean[j]) * s[j];
                }
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, &[x, w], || Op::WeightedContextNorm { x, w, mean: means, inv_std }))
    }

    /// Batch normalisation over every row of `x[..., C]`. In [`BnMode::Train`] the
    /// batch statistics are used and recorded under `name`; in [`BnMode::Eval`] the
    /// given running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running_mean: &[T],
        running_var: &[T],
        name: &str,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap_or(&0);
        if c == 0 || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            bail!(Shape, "batch norm parameters do not match {} channels", c);
        }
        let rows = xv.numel() / c;
        let d = xv.data();
        let (mean, var) = match mode {
            BnMode::Train => {
                if rows < 2 {
                    bail!(InvalidArgument, "batch norm in training mode needs at least 2 rows");
                }
                let inv_r = T::one() / T::of(rows as f64);
                let mut mean = column_sums(rows, c, |i, buf| buf.copy_from_slice(&d[i * c..(i + 1) * c]));
                mean.iter_mut().for_each(|m| *m *= inv_r);
                let mut var = column_sums(rows, c, |i, buf| {
                    for ((s, &v), &m) in buf.iter_mut().zip(&d[i * c..(i + 1) * c]).zip(&mean) {
                        *s = (v - m) * (v - m);
                    }
                });
                var.iter_mut().for_each(|s| *s *= inv_r);
                (mean, var)
            }
            BnMode::Eval => {
                if running_mean.len() != c || running_var.len() != c {
                    bail!(Shape, "running statistics do not match {} channels", c);
                }
                (running_mean.to_vec(), running_var.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(NORM_EPS)).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); d.len()];
        for (orow, row) in out.chunks_exact_mut(c).zip(d.chunks_exact(c)) {
            for j in 0..c {
                orow[j] = (row[j] - mean[j]) * inv_std[j] * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        if mode == BnMode::Train {
            self.bn_stats.push(BnBatchStats { name: name.to_string(), mean: mean.clone(), var });
        }
        Ok(self.push(value, &[x, gamma, beta], || Op::BatchNorm { x, gamma, beta, mean, inv_std, mode }))
    }

    /// `[B, N, C] → [B, 1, C]` average over the points.
    pub fn mean_over_points(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, n, c) = xv.dims3()?;
        if n == 0 {
            bail!(Empty, "mean over zero points");
        }
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            let block = &xv.data()[bi * n * c..(bi + 1) * n * c];
            o.copy_from_slice(&column_sums(n, c, |i, buf| buf.copy_from_slice(&block[i * c..(i + 1) * c])));
            let inv = T::one() / T::of(n as f64);
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::new(&[b, 1, c], out)?;
        Ok(self.push(value, &[x], || Op::MeanPoints(x)))
    }

    /// `Σ wᵢ xᵢ / (Σ wᵢ + ε)` over the points; `w` is `[B, N, 1]`.
    pub fn weighted_mean_over_points(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (b, n, c) = xv.dims3()?;
        if n == 0 {
            bail!(Empty, "weighted mean over zero points");
        }
        if wv.shape() != [b, n, 1] {
            bail!(Shape, "weights {:?} do not match features {:?}", wv.shape(), xv.shape());
        }
        let mut out = vec![T::zero(); b * c];
        let mut denom = vec![T::zero(); b];
        for bi in 0..b {
            let ws = &wv.data()[bi * n..(bi + 1) * n];
            let z = sum(ws) + T::of(WEIGHT_EPS);
            denom[bi] = z;
            let o = &mut out[bi * c..(bi + 1) * c];
            let block = &xv.data()[bi * n * c..(bi + 1) * n * c];
            o.copy_from_slice(&column_sums(n, c, |i, buf| {
                for (s, &v) in buf.iter_mut().zip(&block[i * c..(i + 1) * c]) {
                    *s = ws[i] * v;
                }
            }));
            o.iter_mut().for_each(|a| *a /= z);
        }
        let value = Tensor::new(&[b, 1, c], out)?;
        Ok(self.push(value, &[x, w], || Op::WeightedMeanPoints { x, w, denom }))
    }

    /// Elementwise maximum over same-shaped tensors; ties go to the earliest input.
    pub fn max_over_layers(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else { bail!(Empty, "max over zero layers") };
        if inputs.len() > u16::MAX as usize {
            bail!(InvalidArgument, "too many layers for max pooling");
        }
        let shape = self.shape(first).to_vec();
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                bail!(Shape, "max over layers: {:?} vs {:?}", self.shape(v), shape);
            }
        }
        let mut out = self.value(first).data().to_vec();
        let mut argmax = vec![0u16; out.len()];
        for (l, &v) in inputs.iter().enumerate().skip(1) {
            for ((o, a), &val) in out.iter_mut().zip(argmax.iter_mut()).zip(self.value(v).data()) {
                if val > *o {
                    *o = val;
                    *a = l as u16;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let inputs = inputs.to_vec();
        let deps = inputs.clone();
        Ok(self.push(value, &deps, || Op::MaxLayers { inputs, argmax }))
    }

    /// Softmax across the N points of `[B, N, C]`, independently per channel.
    pub fn softmax_over_points(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, n, c) = xv.dims3()?;
        if n == 0 {
            bail!(Empty, "softmax over zero points");
        }
        let d = xv.data();
        let mut out = vec![T::zero(); d.len()];
        for bi in 0..b {
            let block = &d[bi * n * c..(bi + 1) * n * c];
            let ob = &mut out[bi * n * c..(bi + 1) * n * c];
            let mut m = vec![T::neg_infinity(); c];
            for row in block.chunks_exact(c) {
                m.iter_mut().zip(row).for_each(|(a, &v)| *a = a.max(v));
            }
            for (orow, row) in ob.chunks_exact_mut(c).zip(block.chunks_exact(c)) {
                for ((o, &v), &mj) in orow.iter_mut().zip(row).zip(&m) {
                    *o = (v - mj).exp();
                }
            }
            let total = column_sums(n, c, |i, buf| buf.copy_from_slice(&ob[i * c..(i + 1) * c]));
            for orow in ob.chunks_exact_mut(c) {
                orow.iter_mut().zip(&total).for_each(|(o, &t)| *o /= t);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, &[x], || Op::SoftmaxPoints(x)))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else { bail!(Empty, "concat of zero tensors") };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            bail!(Shape, "concat axis {} out of range for {:?}", axis, base);
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &k)| d != axis && k != base[d]) {
                bail!(Shape, "concat: {:?} incompatible with {:?} on axis {}", s, base, axis);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let inputs = inputs.to_vec();
        let deps = inputs.clone();
        Ok(self.push(value, &deps, || Op::Concat { inputs, axis }))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let lead = *xv.shape().first().unwrap_or(&0);
        if start + len > lead {
            bail!(Shape, "slice {}..{} out of range for leading dim {}", start, start + len, lead);
        }
        let inner: usize = xv.shape()[1..].iter().product();
        let data = xv.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, &[x], || Op::SliceAxis0 { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, &[x], || Op::Reshape(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), &[x], || Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().fold(T::zero(), |a, &v| a + v) / T::of(xv.numel().max(1) as f64);
        self.push(Tensor::scalar(s), &[x], || Op::MeanAll(x))
    }

    /// `r[b]·p + t[b]` for every point of a constant `[B, N, 3]` tensor;
    /// `r` is `[B, 3, 3]` and `t` holds `B × 3` values.
    pub fn transform_points(&mut self, r: Var, t: Var, points: &Tensor<T>) -> Result<Var> {
        let (b, n, k) = points.dims3()?;
        if k != 3 || self.shape(r) != [b, 3, 3] || self.value(t).numel() != b * 3 {
            bail!(Shape, "transform_points: r {:?}, t {:?}, points {:?}", self.shape(r), self.shape(t), points.shape());
        }
        let (rd, td, pd) = (self.value(r).data(), self.value(t).data(), points.data());
        let mut out = vec![T::zero(); b * n * 3];
        for bi in 0..b {
            let rm = &rd[bi * 9..bi * 9 + 9];
            let tv = &td[bi * 3..bi * 3 + 3];
            for i in 0..n {
                let p = &pd[(bi * n + i) * 3..(bi * n + i) * 3 + 3];
                for a in 0..3 {
                    out[(bi * n + i) * 3 + a] = rm[a * 3] * p[0] + rm[a * 3 + 1] * p[1] + rm[a * 3 + 2] * p[2] + tv[a];
                }
            }
        }
        let value = Tensor::new(&[b, n, 3], out)?;
        let points = points.clone();
        Ok(self.push(value, &[r, t], || Op::TransformPoints { r, t, points }))
    }

    /// `(1/B) Σ_b (1/N) Σ_i mask[b,i] · ‖pred[b,i] − target[b,i]‖` for `[B, N, 3]`
    /// point sets and a `B × N` mask.
    pub fn masked_distance(&mut self, pred: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        let (b, n, k) = pv.dims3()?;
        if k != 3 || target.shape() != pv.shape() || mask.numel() != b * n {
            bail!(Shape, "masked_distance: pred {:?}, target {:?}, mask {:?}", pv.shape(), target.shape(), mask.shape());
        }
        let mut total = T::zero();
        for (i, &m) in mask.data().iter().enumerate() {
            if m == T::zero() {
                continue;
            }
            let p = &pv.data()[i * 3..i * 3 + 3];
            let q = &target.data()[i * 3..i * 3 + 3];
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            total += m * d2.sqrt();
        }
        let value = Tensor::scalar(total / T::of((b * n) as f64));
        let (target, mask) = (target.clone(), mask.clone());
        Ok(self.push(value, &[pred], || Op::MaskedDistance { pred, target, mask }))
    }

    /// Weighted binary cross-entropy on logits, averaged over all `B × N` entries.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>, weight: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if target.numel() != lv.numel() || weight.numel() != lv.numel() {
            bail!(Shape, "bce: logits {:?}, target {:?}, weight {:?}", lv.shape(), target.shape(), weight.shape());
        }
        let mut total = T::zero();
        for ((&z, &y), &w) in lv.data().iter().zip(target.data()).zip(weight.data()) {
            let softplus = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
            total += w * (softplus - y * z);
        }
        let value = Tensor::scalar(total / T::of(lv.numel().max(1) as f64));
        let (target, weight) = (target.clone(), weight.clone());
        Ok(self.push(value, &[logits], || Op::BceLogits { logits, target, weight }))
    }

    /// Axis-angle `[B, 3]` to rotation matrices `[B, 3, 3]`.
    pub fn rodrigues(&mut self, v: Var) -> Result<Var> {
        let vv = self.value(v);
        if vv.numel() % 3 != 0 || vv.numel() == 0 {
            bail!(Shape, "rodrigues expects B × 3 values, got {:?}", vv.shape());
        }
        let b = vv.numel() / 3;
        let mut out = Vec::with_capacity(b * 9);
        for p in vv.data().chunks_exact(3) {
            let r = crate::geom::axis_angle_to_rotation(&[p[0].f64(), p[1].f64(), p[2].f64()]);
            out.extend(r.iter().flatten().map(|&e| T::of(e)));
        }
        let value = Tensor::new(&[b, 3, 3], out)?;
        Ok(self.push(value, &[v], || Op::Rodrigues(v)))
    }
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Sum of `g` reduced onto a broadcast operand of shape `target`.
fn reduce_into<T: Real>(slot: &mut [T], g: &[T], lhs_shape: &[usize], target: &[usize], mul: Option<&[T]>, sign: T) {
    match broadcast_strides(lhs_shape, target).expect("shapes checked in forward") {
        None => match mul {
            None => slot.iter_mut().zip(g).for_each(|(s, &gv)| *s += sign * gv),
            Some(m) => slot.iter_mut().zip(g).zip(m).for_each(|((s, &gv), &mv)| *s += sign * gv * mv),
        },
        Some(st) => for_each_bcast(lhs_shape, &st, |i, j| {
            let v = match mul {
                None => g[i],
                Some(m) => g[i] * m[i],
            };
            slot[j] += sign * v;
        }),
    }
}

impl<T: Real> Op<T> {
    pub(crate) fn backward(&self, graph: &Graph<T>, out: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| graph.value(v);
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let shape = val(out).shape();
                if let Some(s) = graph.grad_slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let sign = if matches!(self, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(s) = graph.grad_slot(grads, *b) {
                    reduce_into(s, g, shape, val(*b).shape(), None, sign);
                }
            }
            Op::Mul(a, b) => {
                let shape = val(out).shape();
                let (av, bv) = (val(*a), val(*b));
                if let Some(s) = graph.grad_slot(grads, *a) {
                    match broadcast_strides(shape, bv.shape()).expect("checked") {
                        None => s.iter_mut().zip(g).zip(bv.data()).for_each(|((x, &gv), &bb)| *x += gv * bb),
                        Some(st) => for_each_bcast(shape, &st, |i, j| s[i] += g[i] * bv.data()[j]),
                    }
                }
                if let Some(s) = graph.grad_slot(grads, *b) {
                    reduce_into(s, g, shape, bv.shape(), Some(av.data()), T::one());
                }
            }
            Op::Relu(x) => {
                let y = val(out).data();
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).zip(y).for_each(|((d, &gv), &yv)| {
                        if yv > T::zero() {
                            *d += gv
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                let y = val(out).data();
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).zip(y).for_each(|((d, &gv), &yv)| *d += gv * yv * (T::one() - yv));
                }
            }
            Op::Tanh(x) => {
                let y = val(out).data();
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).zip(y).for_each(|((d, &gv), &yv)| *d += gv * (T::one() - yv * yv));
                }
            }
            Op::Scale(x, c) => {
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / cin;
                if let Some(s) = graph.grad_slot(grads, *x) {
                    T::gemm(rows, cout, cin, Strided::row_major(g, cout), Strided::transposed(wv.data(), cout), s, true);
                }
                if let Some(s) = graph.grad_slot(grads, *w) {
                    T::gemm(cin, rows, cout, Strided::transposed(xv.data(), cin), Strided::row_major(g, cout), s, true);
                }
                if let Some(b) = b {
                    if let Some(s) = graph.grad_slot(grads, *b) {
                        for row in g.chunks_exact(cout) {
                            s.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
            }
            Op::GroupLinear { x, w, b, groups } => {
                let (xv, wv) = (val(*x), val(*w));
                let channels = *xv.shape().last().unwrap();
                let c = channels / groups;
                let rows = xv.numel() / channels;
                if let Some(s) = graph.grad_slot(grads, *x) {
                    for gi in 0..*groups {
                        let a = Strided { data: g, offset: gi * c, row_stride: channels, col_stride: 1 };
                        let bm = Strided { data: wv.data(), offset: gi * c * c, row_stride: 1, col_stride: c };
                        T::gemm_into(rows, c, c, a, bm, s, gi * c, channels, true);
                    }
                }
                if let Some(s) = graph.grad_slot(grads, *w) {
                    for gi in 0..*groups {
                        let a = Strided { data: xv.data(), offset: gi * c, row_stride: 1, col_stride: channels };
                        let bm = Strided { data: g, offset: gi * c, row_stride: channels, col_stride: 1 };
                        T::gemm_into(c, rows, c, a, bm, s, gi * c * c, c, true);
                    }
                }
                if let Some(b) = b {
                    if let Some(s) = graph.grad_slot(grads, *b) {
                        for row in g.chunks_exact(channels) {
                            s.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                }
            }
            Op::ContextNorm { x, inv_std } => {
                let y = val(out);
                let (b, n, c) = y.dims3().expect("rank 3");
                let Some(s) = graph.grad_slot(grads, *x) else { return };
                let inv_n = T::one() / T::of(n as f64);
                for bi in 0..b {
                    let range = bi * n * c..(bi + 1) * n * c;
                    let (gb, yb) = (&g[range.clone()], &y.data()[range.clone()]);
                    let mut mg = vec![T::zero(); c];
                    let mut mgy = vec![T::zero(); c];
                    for (grow, yrow) in gb.chunks_exact(c).zip(yb.chunks_exact(c)) {
                        for j in 0..c {
                            mg[j] += grow[j];
                            mgy[j] += grow[j] * yrow[j];
                        }
                    }
                    let sd = &inv_std[bi * c..(bi + 1) * c];
                    for ((drow, grow), yrow) in s[range].chunks_exact_mut(c).zip(gb.chunks_exact(c)).zip(yb.chunks_exact(c)) {
                        for j in 0..c {
                            drow[j] += sd[j] * (grow[j] - mg[j] * inv_n - yrow[j] * mgy[j] * inv_n);
                        }
                    }
                }
            }
            Op::WeightedContextNorm { x, w, mean, inv_std } => {
                let (xv, wv) = (val(*x), val(*w));
                let (b, n, c) = xv.dims3().expect("rank 3");
                let half = T::of(0.5);
                let two = T::of(2.0);
                for bi in 0..b {
                    let range = bi * n * c..(bi + 1) * n * c;
                    let (gb, xb) = (&g[range.clone()], &xv.data()[range.clone()]);
                    let ws = &wv.data()[bi * n..(bi + 1) * n];
                    let mu = &mean[bi * c..(bi + 1) * c];
                    let sd = &inv_std[bi * c..(bi + 1) * c];
                    let mut gsum = vec![T::zero(); c];
                    let mut p = vec![T::zero(); c];
                    let mut s1 = vec![T::zero(); c];
                    for ((grow, xrow), &wi) in gb.chunks_exact(c).zip(xb.chunks_exact(c)).zip(ws) {
                        for j in 0..c {
                            let xh = xrow[j] - mu[j];
                            gsum[j] += grow[j];
                            p[j] += grow[j] * xh;
                            s1[j] += wi * xh;
                        }
                    }
                    if let Some(s) = graph.grad_slot(grads, *x) {
                        let db = &mut s[range.clone()];
                        for (((drow, grow), xrow), &wi) in db.chunks_exact_mut(c).zip(gb.chunks_exact(c)).zip(xb.chunks_exact(c)).zip(ws) {
                            for j in 0..c {
                                let xh = xrow[j] - mu[j];
                                let s3 = sd[j] * sd[j] * sd[j];
                                drow[j] += sd[j] * grow[j] - sd[j] * wi * gsum[j] - s3 * p[j] * wi * (xh - s1[j]);
                            }
                        }
                    }
                    if let Some(s) = graph.grad_slot(grads, *w) {
                        let db = &mut s[bi * n..(bi + 1) * n];
                        for (d, xrow) in db.iter_mut().zip(xb.chunks_exact(c)) {
                            let mut acc = T::zero();
                            for j in 0..c {
                                let xh = xrow[j] - mu[j];
                                let s3 = sd[j] * sd[j] * sd[j];
                                acc += -sd[j] * xrow[j] * gsum[j] - half * s3 * p[j] * (xh * xh - two * xrow[j] * s1[j]);
                            }
                            *d += acc;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, mode } => {
                let xv = val(*x);
                let c = mean.len();
                let rows = xv.numel() / c;
                let gd = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gy = vec![T::zero(); c];
                for (grow, xrow) in g.chunks_exact(c).zip(xv.data().chunks_exact(c)) {
                    for j in 0..c {
                        let yh = (xrow[j] - mean[j]) * inv_std[j];
                        sum_g[j] += grow[j];
                        sum_gy[j] += grow[j] * yh;
                    }
                }
                if let Some(s) = graph.grad_slot(grads, *gamma) {
                    s.iter_mut().zip(&sum_gy).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = graph.grad_slot(grads, *beta) {
                    s.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if let Some(s) = graph.grad_slot(grads, *x) {
                    let inv_r = T::one() / T::of(rows as f64);
                    for ((drow, grow), xrow) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xv.data().chunks_exact(c)) {
                        for j in 0..c {
                            let k = gd[j] * inv_std[j];
                            drow[j] += match mode {
                                BnMode::Eval => k * grow[j],
                                BnMode::Train => {
                                    let yh = (xrow[j] - mean[j]) * inv_std[j];
                                    k * (grow[j] - sum_g[j] * inv_r - yh * sum_gy[j] * inv_r)
                                }
                            };
                        }
                    }
                }
            }
            Op::MeanPoints(x) => {
                let (b, n, c) = val(*x).dims3().expect("rank 3");
                let Some(s) = graph.grad_slot(grads, *x) else { return };
                let inv = T::one() / T::of(n as f64);
                for bi in 0..b {
                    let gb = &g[bi * c..(bi + 1) * c];
                    for drow in s[bi * n * c..(bi + 1) * n * c].chunks_exact_mut(c) {
                        drow.iter_mut().zip(gb).for_each(|(d, &gv)| *d += gv * inv);
                    }
                }
            }
            Op::WeightedMeanPoints { x, w, denom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (b, n, c) = xv.dims3().expect("rank 3");
                let m = val(out).data();
                for bi in 0..b {
                    let gb = &g[bi * c..(bi + 1) * c];
                    let z = denom[bi];
                    let ws = &wv.data()[bi * n..(bi + 1) * n];
                    if let Some(s) = graph.grad_slot(grads, *x) {
                        for (drow, &wi) in s[bi * n * c..(bi + 1) * n * c].chunks_exact_mut(c).zip(ws) {
                            let k = wi / z;
                            drow.iter_mut().zip(gb).for_each(|(d, &gv)| *d += gv * k);
                        }
                    }
                    if let Some(s) = graph.grad_slot(grads, *w) {
                        let mb = &m[bi * c..(bi + 1) * c];
                        for (d, xrow) in s[bi * n..(bi + 1) * n].iter_mut().zip(xv.data()[bi * n * c..(bi + 1) * n * c].chunks_exact(c)) {
                            let mut acc = T::zero();
                            for j in 0..c {
                                acc += gb[j] * (xrow[j] - mb[j]);
                            }
                            *d += acc / z;
                        }
                    }
                }
            }
            Op::MaxLayers { inputs, argmax } => {
                for (l, &v) in inputs.iter().enumerate() {
                    if let Some(s) = graph.grad_slot(grads, v) {
                        for ((d, &gv), &a) in s.iter_mut().zip(g).zip(argmax) {
                            if a as usize == l {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxPoints(x) => {
                let y = val(out);
                let (b, n, c) = y.dims3().expect("rank 3");
                let Some(s) = graph.grad_slot(grads, *x) else { return };
                let yd = y.data();
                for bi in 0..b {
                    for j in 0..c {
                        let idx = |i: usize| (bi * n + i) * c + j;
                        let dot = (0..n).fold(T::zero(), |a, i| a + g[idx(i)] * yd[idx(i)]);
                        for i in 0..n {
                            s[idx(i)] += yd[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = val(out).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = graph.shape(v)[*axis] * inner;
                    if let Some(s) = graph.grad_slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            s[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(d, &gv)| *d += gv);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::SliceAxis0 { x, start } => {
                let inner: usize = val(*x).shape()[1..].iter().product();
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s[start * inner..start * inner + g.len()].iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::SumAll(x) => {
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                let k = g[0] / T::of(val(*x).numel().max(1) as f64);
                if let Some(s) = graph.grad_slot(grads, *x) {
                    s.iter_mut().for_each(|d| *d += k);
                }
            }
            Op::TransformPoints { r, t, points } => {
                let (b, n, _) = points.dims3().expect("rank 3");
                let pd = points.data();
                if let Some(s) = graph.grad_slot(grads, *r) {
                    for bi in 0..b {
                        for i in 0..n {
                            let base = (bi * n + i) * 3;
                            for a in 0..3 {
                                for k in 0..3 {
                                    s[bi * 9 + a * 3 + k] += g[base + a] * pd[base + k];
                                }
                            }
                        }
                    }
                }
                if let Some(s) = graph.grad_slot(grads, *t) {
                    for bi in 0..b {
                        for i in 0..n {
                            for a in 0..3 {
                                s[bi * 3 + a] += g[(bi * n + i) * 3 + a];
                            }
                        }
                    }
                }
            }
            Op::MaskedDistance { pred, target, mask } => {
                let pv = val(*pred);
                let k = g[0] / T::of(mask.numel() as f64);
                if let Some(s) = graph.grad_slot(grads, *pred) {
                    for (i, &m) in mask.data().iter().enumerate() {
                        if m == T::zero() {
                            continue;
                        }
                        let p = &pv.data()[i * 3..i * 3 + 3];
                        let q = &target.data()[i * 3..i * 3 + 3];
                        let diff = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                        let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
                        if d > T::zero() {
                            for a in 0..3 {
                                s[i * 3 + a] += k * m * diff[a] / d;
                            }
                        }
                    }
                }
            }
            Op::BceLogits { logits, target, weight } => {
                let lv = val(*logits);
                let k = g[0] / T::of(lv.numel().max(1) as f64);
                if let Some(s) = graph.grad_slot(grads, *logits) {
                    for (((d, &z), &y), &w) in s.iter_mut().zip(lv.data()).zip(target.data()).zip(weight.data()) {
                        *d += k * w * (sigmoid(z) - y);
                    }
                }
            }
            Op::Rodrigues(v) => {
                let vv = val(*v);
                let rv = val(out);
                let Some(s) = graph.grad_slot(grads, *v) else { return };
                for (bi, p) in vv.data().chunks_exact(3).enumerate() {
                    let vec3 = [p[0].f64(), p[1].f64(), p[2].f64()];
                    let rot: [[f64; 3]; 3] = core::array::from_fn(|i| core::array::from_fn(|j| rv.data()[bi * 9 + i * 3 + j].f64()));
                    let gm = &g[bi * 9..bi * 9 + 9];
                    for k in 0..3 {
                        let dr = rodrigues_partial(&vec3, &rot, k);
                        let mut acc = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                acc += gm[i * 3 + j].f64() * dr[i][j];
                            }
                        }
                        s[bi * 3 + k] += T::of(acc);
                    }
                }
            }
        }
    }
}

/// `∂R/∂v_k` for `R = exp([v]×)`:
/// `(v_k [v]× + [v × (I − R) e_k]×) R / ‖v‖²`, and `[e_k]×` at the origin.
fn rodrigues_partial(v: &[f64; 3], r: &[[f64; 3]; 3], k: usize) -> [[f64; 3]; 3] {
    use crate::geom::{cross, mat_mul, skew};
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let mut ek = [0.0; 3];
    ek[k] = 1.0;
    if theta2 < 1e-14 {
        return skew(&ek);
    }
    let i_minus_r_ek = [ek[0] - r[0][k], ek[1] - r[1][k], ek[2] - r[2][k]];
    let a = skew(v);
    let b = skew(&cross(v, &i_minus_r_ek));
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (v[k] * a[i][j] + b[i][j]) / theta2;
        }
    }
    mat_mul(&m, r)
}
