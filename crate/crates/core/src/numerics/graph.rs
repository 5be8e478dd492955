//! Per-step reverse-mode tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every forward op
//! together with whatever the backward pass needs, and is consumed by
//! [`Graph::backward`]. Ops are fused at the granularity the model uses
//! (linear, layer norm, multi-head attention, conv1d, ...) so the tape stays
//! short and each backward rule can be checked in isolation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const HUBER_DELTA: f64 = 1.0;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a stream seeded with `seed`.
    Train {
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    L1,
    Mse,
    Huber,
}

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnContext {
    /// Every query sees every key; `key_valid[j] == false` masks key `j`.
    Full { key_valid: Option<Vec<bool>> },
    /// Rows are `batch` sequences of length `len`; query `t` attends to a
    /// window of `kernel` keys in its own sequence, shifted inwards at the
    /// edges so the window size stays constant.
    Neighborhood { batch: usize, len: usize, kernel: usize },
    /// Explicit per-query boolean mask, row-major `[n_queries x n_keys]`.
    Masked { allowed: Vec<bool> },
}

/// Start of the clamped neighborhood window for position `t`.
pub fn neighborhood_start(t: usize, len: usize, kernel: usize) -> usize {
    if kernel >= len {
        return 0;
    }
    let half = kernel / 2;
    t.saturating_sub(half).min(len - kernel)
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention(AttentionTape),
    Conv1d { x: Var, w: Var, b: Var, cols: Vec<f64>, geom: ConvGeom },
    Upsample { x: Var, batch: usize, len_in: usize, len_out: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MulConst { x: Var, factor: Vec<f64> },
    Regression { kind: RegressionKind, pred: Var, target: Vec<f64>, weights: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    len_in: usize,
    len_out: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug)]
struct AttentionTape {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// Per query: candidate key indices.
    keys: Vec<Vec<usize>>,
    /// Per query, per head: weights over `keys[i]` (0 for masked keys).
    probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    rng: Option<RngStream>,
    consumed: bool,
}

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn regression_value(kind: RegressionKind, r: f64) -> f64 {
    match kind {
        RegressionKind::L1 => libm::fabs(r),
        RegressionKind::Mse => r * r,
        RegressionKind::Huber => {
            let a = libm::fabs(r);
            if a <= HUBER_DELTA {
                0.5 * r * r
            } else {
                HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
            }
        }
    }
}

fn regression_grad(kind: RegressionKind, r: f64) -> f64 {
    match kind {
        RegressionKind::L1 => {
            if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        RegressionKind::Mse => 2.0 * r,
        RegressionKind::Huber => r.clamp(-HUBER_DELTA, HUBER_DELTA),
    }
}

/// Row-wise softmax over `logits` restricted to `allowed`; masked entries get
/// exactly zero. Returns `None` when nothing is allowed.
pub fn masked_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Option<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for (j, &l) in logits.iter().enumerate() {
        if allowed(j) && l > max {
            max = l;
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (j, &l) in logits.iter().enumerate() {
        if allowed(j) {
            let e = libm::exp(l - max);
            out[j] = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Some(out)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            rng: match mode {
                Mode::Eval => None,
                Mode::Train { seed } => Some(RngStream::new(seed)),
            },
            consumed: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.store.entry(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    /// `x[.., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.cols() != wv.shape()[1] {
            return shape_err(format!("linear: x {:?} vs w {:?}", xv.shape(), wv.shape()));
        }
        let (rows, inp, out) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != out {
                return shape_err(format!("linear bias {:?} vs out {out}", bv.shape()));
            }
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv.data());
            }
        }
        matmul_nt_acc(xv.data(), wv.data(), &mut y, rows, inp, out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() {
            return shape_err(format!("elementwise: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| c * x).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Per-row normalisation over the last axis followed by `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if c == 0 || gv.numel() != c || bv.numel() != c {
            return shape_err(format!("layer_norm: x {:?}, gamma {:?}", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
    /// `v` (`[n x C]`, `[m x C]`, `[m x C]`), heads split along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, ctx: &AttnContext) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        let (n, m) = (qv.rows(), kv.rows());
        if kv.cols() != c || vv.cols() != c || vv.rows() != m {
            return shape_err(format!("attention: q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("model dim {c} not divisible by {heads} heads")));
        }
        let keys = attention_keys(ctx, n, m)?;
        let dh = c / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = vec![0.0; n * c];
        let mut probs = Vec::with_capacity(n);
        let mut logits = Vec::new();
        for i in 0..n {
            let (cand, valid) = &keys[i];
            let mut pi = Vec::with_capacity(cand.len() * heads);
            for h in 0..heads {
                let qrow = &qv.row(i)[h * dh..(h + 1) * dh];
                logits.clear();
                logits.extend(cand.iter().map(|&j| dot(qrow, &kv.row(j)[h * dh..(h + 1) * dh]) * scale));
                let p = masked_softmax(&logits, |j| valid[j]).ok_or(Error::EmptyAttention)?;
                let orow = &mut out[i * c + h * dh..i * c + (h + 1) * dh];
                for (pj, &j) in p.iter().zip(cand) {
                    if *pj == 0.0 {
                        continue;
                    }
                    for (o, vjv) in orow.iter_mut().zip(&vv.row(j)[h * dh..(h + 1) * dh]) {
                        *o += pj * vjv;
                    }
                }
                pi.extend_from_slice(&p);
            }
            probs.push(pi);
        }
        let t = Tensor::new(&[n, c], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let keys = keys.into_iter().map(|(cand, _)| cand).collect();
        Ok(self.push(t, Op::Attention(AttentionTape { q, k, v, heads, keys, probs }), rg))
    }

    /// Temporal cross-correlation with kernel 3 and zero padding 1 over
    /// `batch` sequences of `len` rows. `w` is `[c_out, c_in, 3]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, batch: usize, len: usize, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if len == 0 {
            return shape_err("conv1d: empty sequence".into());
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv1d stride {stride} not in {{1, 2}}")));
        }
        if wv.rank() != 3 || wv.shape()[2] != 3 {
            return shape_err(format!("conv1d weight {:?} must be [c_out, c_in, 3]", wv.shape()));
        }
        let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
        if xv.rows() != batch * len || xv.cols() != c_in || bv.numel() != c_out {
            return shape_err(format!("conv1d: x {:?} for batch {batch} len {len}, w {:?}", xv.shape(), wv.shape()));
        }
        let len_out = len.div_ceil(stride);
        let rows_out = batch * len_out;
        let kc = 3 * c_in;
        let mut cols = vec![0.0; rows_out * kc];
        for bi in 0..batch {
            for t in 0..len_out {
                let dst = &mut cols[(bi * len_out + t) * kc..(bi * len_out + t + 1) * kc];
                for j in 0..3 {
                    let p = (t * stride + j) as isize - 1;
                    if p < 0 || p as usize >= len {
                        continue;
                    }
                    let src = xv.row(bi * len + p as usize);
                    for c in 0..c_in {
                        dst[c * 3 + j] = src[c];
                    }
                }
            }
        }
        let mut y = vec![0.0; rows_out * c_out];
        for r in 0..rows_out {
            y[r * c_out..(r + 1) * c_out].copy_from_slice(bv.data());
        }
        matmul_nt_acc(&cols, wv.data(), &mut y, rows_out, kc, c_out);
        let geom = ConvGeom { batch, len_in: len, len_out, stride, c_in, c_out };
        let t = Tensor::new(&[rows_out, c_out], y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(t, Op::Conv1d { x, w, b, cols, geom }, rg))
    }

    /// Nearest-neighbour upsampling by 2 along time, truncated to `len_out`.
    pub fn upsample2(&mut self, x: Var, batch: usize, len_in: usize, len_out: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != batch * len_in || len_out > 2 * len_in {
            return shape_err(format!("upsample2: x {:?}, batch {batch}, len {len_in}", xv.shape()));
        }
        let c = xv.cols();
        let mut y = Vec::with_capacity(batch * len_out * c);
        for bi in 0..batch {
            for t in 0..len_out {
                y.extend_from_slice(xv.row(bi * len_in + t / 2));
            }
        }
        let t = Tensor::new(&[batch * len_out, c], y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample { x, batch, len_in, len_out }, rg))
    }

    /// Per-group, per-channel maximum over the valid rows of each group of
    /// `group_size` consecutive rows.
    #[allow(clippy::needless_range_loop)]
    pub fn masked_max_pool(&mut self, x: Var, group_size: usize, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if group_size == 0 || rows % group_size != 0 || valid.len() != rows {
            return shape_err(format!("max_pool: x {:?}, group {group_size}", xv.shape()));
        }
        let groups = rows / group_size;
        let mut out = vec![0.0; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            let mut any = false;
            for r in g * group_size..(g + 1) * group_size {
                if !valid[r] {
                    continue;
                }
                let row = xv.row(r);
                for j in 0..c {
                    if !any || row[j] > out[g * c + j] {
                        out[g * c + j] = row[j];
                        argmax[g * c + j] = r;
                    }
                }
                any = true;
            }
            if !any {
                return Err(Error::EmptyPolyline);
            }
        }
        let t = Tensor::new(&[groups, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MaxPool { x, argmax }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut y = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return shape_err(format!("gather_rows: index {i} out of {rows}"));
            }
            y.extend_from_slice(xv.row(i));
        }
        let t = Tensor::new(&[idx.len(), c], y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows: no inputs".into());
        };
        let c = self.value(first).cols();
        let mut y = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return shape_err(format!("concat_rows: {} vs {c} columns", pv.cols()));
            }
            rows += pv.rows();
            y.extend_from_slice(pv.data());
        }
        let t = Tensor::new(&[rows, c], y)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Inverted dropout; identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.rng.is_none() || rate <= 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let rng = self.rng.as_mut().expect("train mode");
        let keep = 1.0 / (1.0 - rate);
        let factor: Vec<f64> = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&factor).map(|(a, f)| a * f).collect();
        let t = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::MulConst { x, factor }, rg)
    }

    /// `sum_i weights[i] * f(pred[i] - target[i])`.
    pub fn regression_loss(&mut self, kind: RegressionKind, pred: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.numel() != target.len() || target.len() != weights.len() {
            return shape_err(format!(
                "regression loss: pred {} vs target {} vs weights {}",
                pv.numel(),
                target.len(),
                weights.len()
            ));
        }
        let mut s = 0.0;
        for ((p, t), w) in pv.data().iter().zip(target).zip(weights) {
            if *w != 0.0 {
                s += w * regression_value(kind, p - t);
            }
        }
        let rg = self.rg(pred);
        let op = Op::Regression { kind, pred, target: target.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(s), op, rg))
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, k) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return shape_err(format!("cross_entropy: logits {:?}, {} targets", lv.shape(), targets.len()));
        }
        let mut probs = Vec::with_capacity(rows * k);
        let mut s = 0.0;
        for r in 0..rows {
            if targets[r] >= k {
                return shape_err(format!("cross_entropy: target {} >= {k}", targets[r]));
            }
            let row = lv.row(r);
            let p = masked_softmax(row, |_| true).ok_or(Error::EmptyAttention)?;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&l| libm::exp(l - max)).sum::<f64>());
            s += weights[r] * (lse - row[targets[r]]);
            probs.extend_from_slice(&p);
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Tensor::scalar(s), op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse accumulation from the scalar `root`. The tape is spent
    /// afterwards; a second call is an error.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        self.consumed = true;
        let nodes = core::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(self.store.len());

        let value = |v: Var| -> &Tensor {
            let node = &nodes[v.0];
            match (&node.value, &node.op) {
                (Some(t), _) => t,
                (None, Op::Param(id)) => &self.store.entry(*id).value,
                _ => unreachable!(),
            }
        };

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            // Accumulate into a predecessor's slot, allocating on first use.
            macro_rules! slot {
                ($v:expr) => {{
                    let v: Var = $v;
                    if nodes[v.0].requires_grad {
                        let n = value(v).numel();
                        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                    } else {
                        None
                    }
                }};
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let shape = self.store.entry(*id).value.shape();
                    out.slots[id.0] = Some(Tensor::new(shape, dy)?);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (value(*x), value(*w));
                    let (rows, inp, o) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                    if let Some(dx) = slot!(*x) {
                        matmul_acc(&dy, wv.data(), dx, rows, o, inp);
                    }
                    if let Some(dw) = slot!(*w) {
                        matmul_tn_acc(&dy, xv.data(), dw, rows, o, inp);
                    }
                    if let Some(b) = b {
                        if let Some(db) = slot!(*b) {
                            for r in 0..rows {
                                for (d, g) in db.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
                                    *d += g;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = slot!(v) {
                            d.iter_mut().zip(&dy).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = slot!(*a) {
                        d.iter_mut().zip(&dy).for_each(|(d, g)| *d += g);
                    }
                    if let Some(d) = slot!(*b) {
                        d.iter_mut().zip(&dy).for_each(|(d, g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (value(*a).data(), value(*b).data());
                    if let Some(d) = slot!(*a) {
                        for ((d, g), y) in d.iter_mut().zip(&dy).zip(bv) {
                            *d += g * y;
                        }
                    }
                    if let Some(d) = slot!(*b) {
                        for ((d, g), x) in d.iter_mut().zip(&dy).zip(av) {
                            *d += g * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(d) = slot!(*a) {
                        d.iter_mut().zip(&dy).for_each(|(d, g)| *d += c * g);
                    }
                }
                Op::Gelu(a) => {
                    let av = value(*a).data();
                    if let Some(d) = slot!(*a) {
                        for ((d, g), x) in d.iter_mut().zip(&dy).zip(av) {
                            *d += g * gelu_grad(*x);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = value(*gamma).data();
                    let c = gv.len();
                    let rows = inv_std.len();
                    if let Some(dg) = slot!(*gamma) {
                        for r in 0..rows {
                            for j in 0..c {
                                dg[j] += dy[r * c + j] * xhat[r * c + j];
                            }
                        }
                    }
                    if let Some(db) = slot!(*beta) {
                        for r in 0..rows {
                            for j in 0..c {
                                db[j] += dy[r * c + j];
                            }
                        }
                    }
                    if let Some(dx) = slot!(*x) {
                        let mut dxhat = vec![0.0; c];
                        for r in 0..rows {
                            let xh = &xhat[r * c..(r + 1) * c];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                dxhat[j] = dy[r * c + j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xh[j];
                            }
                            let inv = inv_std[r];
                            for j in 0..c {
                                dx[r * c + j] += inv * (dxhat[j] - s1 / c as f64 - xh[j] * s2 / c as f64);
                            }
                        }
                    }
                }
                Op::Attention(tape) => {
                    let AttentionTape { q, k, v, heads, keys, probs } = tape;
                    let (qv, kv, vv) = (value(*q), value(*k), value(*v));
                    let c = qv.cols();
                    let dh = c / heads;
                    let scale = 1.0 / libm::sqrt(dh as f64);
                    let (n, m) = (qv.rows(), kv.rows());
                    let mut dq = vec![0.0; n * c];
                    let mut dk = vec![0.0; m * c];
                    let mut dv = vec![0.0; m * c];
                    let mut dp = Vec::new();
                    for i in 0..n {
                        let cand = &keys[i];
                        let w = cand.len();
                        for h in 0..*heads {
                            let p = &probs[i][h * w..(h + 1) * w];
                            let go = &dy[i * c + h * dh..i * c + (h + 1) * dh];
                            dp.clear();
                            let mut s = 0.0;
                            for (pj, &j) in p.iter().zip(cand) {
                                let d = if *pj == 0.0 { 0.0 } else { dot(go, &vv.row(j)[h * dh..(h + 1) * dh]) };
                                dp.push(d);
                                s += pj * d;
                                if *pj != 0.0 {
                                    for (a, g) in dv[j * c + h * dh..j * c + (h + 1) * dh].iter_mut().zip(go) {
                                        *a += pj * g;
                                    }
                                }
                            }
                            let qrow = &qv.row(i)[h * dh..(h + 1) * dh];
                            for ((pj, &j), d) in p.iter().zip(cand).zip(&dp) {
                                if *pj == 0.0 {
                                    continue;
                                }
                                let ds = pj * (d - s) * scale;
                                let krow = &kv.row(j)[h * dh..(h + 1) * dh];
                                for (a, kk) in dq[i * c + h * dh..i * c + (h + 1) * dh].iter_mut().zip(krow) {
                                    *a += ds * kk;
                                }
                                for (a, qq) in dk[j * c + h * dh..j * c + (h + 1) * dh].iter_mut().zip(qrow) {
                                    *a += ds * qq;
                                }
                            }
                        }
                    }
                    for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if let Some(d) = slot!(var) {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Conv1d { x, w, b, cols, geom } => {
                    let ConvGeom { batch, len_in, len_out, stride, c_in, c_out } = *geom;
                    let rows_out = batch * len_out;
                    let kc = 3 * c_in;
                    if let Some(db) = slot!(*b) {
                        for r in 0..rows_out {
                            for (d, g) in db.iter_mut().zip(&dy[r * c_out..(r + 1) * c_out]) {
                                *d += g;
                            }
                        }
                    }
                    if let Some(dw) = slot!(*w) {
                        matmul_tn_acc(&dy, cols, dw, rows_out, c_out, kc);
                    }
                    if nodes[x.0].requires_grad {
                        let wv = value(*w);
                        let mut dcols = vec![0.0; rows_out * kc];
                        matmul_acc(&dy, wv.data(), &mut dcols, rows_out, c_out, kc);
                        let dx = slot!(*x).unwrap();
                        for bi in 0..batch {
                            for t in 0..len_out {
                                let src = &dcols[(bi * len_out + t) * kc..(bi * len_out + t + 1) * kc];
                                for j in 0..3 {
                                    let p = (t * stride + j) as isize - 1;
                                    if p < 0 || p as usize >= len_in {
                                        continue;
                                    }
                                    let row = (bi * len_in + p as usize) * c_in;
                                    for c in 0..c_in {
                                        dx[row + c] += src[c * 3 + j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Upsample { x, batch, len_in, len_out } => {
                    let c = value(*x).cols();
                    if let Some(dx) = slot!(*x) {
                        for bi in 0..*batch {
                            for t in 0..*len_out {
                                let src = &dy[(bi * len_out + t) * c..(bi * len_out + t + 1) * c];
                                let dst = (bi * len_in + t / 2) * c;
                                for j in 0..c {
                                    dx[dst + j] += src[j];
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let c = value(*x).cols();
                    if let Some(dx) = slot!(*x) {
                        for (o, &r) in argmax.iter().enumerate() {
                            dx[r * c + o % c] += dy[o];
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = value(*x).cols();
                    if let Some(dx) = slot!(*x) {
                        for (o, &r) in idx.iter().enumerate() {
                            for j in 0..c {
                                dx[r * c + j] += dy[o * c + j];
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = value(p).numel();
                        if let Some(d) = slot!(p) {
                            d.iter_mut().zip(&dy[off..off + n]).for_each(|(d, g)| *d += g);
                        }
                        off += n;
                    }
                }
                Op::Reshape(x) => {
                    if let Some(d) = slot!(*x) {
                        d.iter_mut().zip(&dy).for_each(|(d, g)| *d += g);
                    }
                }
                Op::MulConst { x, factor } => {
                    if let Some(d) = slot!(*x) {
                        for ((d, g), f) in d.iter_mut().zip(&dy).zip(factor) {
                            *d += g * f;
                        }
                    }
                }
                Op::Regression { kind, pred, target, weights } => {
                    let pv = value(*pred).data();
                    let g = dy[0];
                    if let Some(d) = slot!(*pred) {
                        for i in 0..pv.len() {
                            if weights[i] != 0.0 {
                                d[i] += g * weights[i] * regression_grad(*kind, pv[i] - target[i]);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let k = value(*logits).cols();
                    let g = dy[0];
                    if let Some(d) = slot!(*logits) {
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            for j in 0..k {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                d[r * k + j] += g * w * (probs[r * k + j] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let g = dy[0];
                    if let Some(d) = slot!(*x) {
                        d.iter_mut().for_each(|d| *d += g);
                    }
                }
            }
        }
        Ok(out)
    }
}

type KeyList = (Vec<usize>, Vec<bool>);

fn attention_keys(ctx: &AttnContext, n: usize, m: usize) -> Result<Vec<KeyList>> {
    match ctx {
        AttnContext::Full { key_valid } => {
            if let Some(kv) = key_valid {
                if kv.len() != m {
                    return shape_err(format!("key padding mask len {} vs {m} keys", kv.len()));
                }
            }
            let valid = key_valid.clone().unwrap_or_else(|| vec![true; m]);
            if !valid.iter().any(|&b| b) {
                return Err(Error::EmptyAttention);
            }
            let all: Vec<usize> = (0..m).collect();
            Ok((0..n).map(|_| (all.clone(), valid.clone())).collect())
        }
        AttnContext::Neighborhood { batch, len, kernel } => {
            if kernel % 2 == 0 {
                return Err(Error::Config(format!("neighborhood kernel {kernel} must be odd")));
            }
            if n != batch * len || m != n {
                return shape_err(format!("neighborhood attention: {n} queries for {batch}x{len}"));
            }
            let w = (*kernel).min(*len);
            let mut out = Vec::with_capacity(n);
            for b in 0..*batch {
                for t in 0..*len {
                    let start = neighborhood_start(t, *len, *kernel);
                    out.push(((b * len + start..b * len + start + w).collect(), vec![true; w]));
                }
            }
            Ok(out)
        }
        AttnContext::Masked { allowed } => {
            if allowed.len() != n * m {
                return shape_err(format!("attention mask len {} vs {n}x{m}", allowed.len()));
            }
            let all: Vec<usize> = (0..m).collect();
            Ok((0..n).map(|i| (all.clone(), allowed[i * m..(i + 1) * m].to_vec())).collect())
        }
    }
}
