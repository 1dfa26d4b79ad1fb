//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together with
//! whatever the backward rule needs. Calling [`Graph::backward`] on a scalar
//! walks the tape once in reverse creation order. Node indices are
//! topologically ordered by construction since an op can only consume
//! existing nodes.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{Gradients, ParameterStore};
use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-graph counters for attention buffers. Every stored softmax weight and
/// every gathered key/value row is counted, which gives an allocator-free,
/// deterministic estimate of attention working set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    pub calls: usize,
    pub weight_entries: usize,
    pub pair_rows: usize,
    pub buffer_values: usize,
}

impl AttentionStats {
    pub fn buffer_bytes(&self) -> usize {
        self.buffer_values * std::mem::size_of::<f64>()
    }
}

enum Op {
    Constant,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention(Box<AttentionSaved>),
    LogSoftmaxRows(Var),
    SumAll(Var),
    WeightedSum { x: Var, w: Vec<f64> },
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    offsets: Arc<Vec<usize>>,
    heads: usize,
    scale: f64,
    weights: Vec<f64>,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grad_enabled: bool,
    stats: AttentionStats,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            stats: AttentionStats::default(),
        }
    }

    /// A graph that never tracks gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn attention_stats(&self) -> AttentionStats {
        self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Binds a named parameter. Repeated lookups return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = Arc::clone(store.get(name)?);
        self.nodes.push(Node {
            value: t,
            op: Op::Param,
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `x[n, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.expect_2d("linear", x)?;
        let (win, dout) = self.expect_2d("linear", w)?;
        if win != din {
            return Err(Error::shape("linear", format!("input has {din} features, weight expects {win}")));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.data(b);
            if bias.len() != dout {
                return Err(Error::shape("linear", format!("bias has {} values, expected {dout}", bias.len())));
            }
            for row in out.chunks_exact_mut(dout.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm_acc(self.data(x), self.data(w), &mut out, n, din, dout);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.expect_2d("matmul", a)?;
        let (k2, m) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(self.data(a), self.data(b), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y)?;
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Div(a, b), ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary ops preserve shape");
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (n, _) = self.expect_2d("concat_cols", first)?;
        let mut width = 0;
        for &p in parts {
            let (pn, pc) = self.expect_2d("concat_cols", p)?;
            if pn != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} vs {pn}")));
            }
            width += pc;
        }
        let mut out = vec![0.0; n * width];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for r in 0..n {
                out[r * width + offset..r * width + offset + pc].copy_from_slice(t.row(r));
            }
            offset += pc;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, width], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, c) = self.expect_2d("concat_rows", first)?;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (pn, pc) = self.expect_2d("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
            }
            out.extend_from_slice(self.data(p));
            n += pn;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.expect_2d("gather_rows", x)?;
        let mut out = Vec::with_capacity(idx.len() * c);
        let t = self.value(x);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("gather_rows", format!("row {i} out of {n}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.expect_2d("slice_cols", x)?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Per-group, per-channel maximum over valid rows. `x` is `[groups·n, d]`
    /// with `mask.len() == groups·n`; groups with no valid row produce zeros and
    /// a `false` validity bit.
    pub fn masked_max_pool(&mut self, x: Var, mask: &[bool], n: usize) -> Result<(Var, Vec<bool>)> {
        let (rows, d) = self.expect_2d("masked_max_pool", x)?;
        if mask.len() != rows || n == 0 || rows % n != 0 {
            return Err(Error::shape(
                "masked_max_pool",
                format!("{rows} rows, mask {}, group size {n}", mask.len()),
            ));
        }
        let groups = rows / n;
        let t = self.value(x);
        let mut out = vec![0.0; groups * d];
        let mut argmax = vec![usize::MAX; groups * d];
        let mut valid = vec![false; groups];
        for g in 0..groups {
            for r in g * n..(g + 1) * n {
                if !mask[r] {
                    continue;
                }
                let row = t.row(r);
                if !valid[g] {
                    out[g * d..(g + 1) * d].copy_from_slice(row);
                    for (c, a) in argmax[g * d..(g + 1) * d].iter_mut().enumerate() {
                        *a = r * d + c;
                    }
                    valid[g] = true;
                    continue;
                }
                for c in 0..d {
                    if row[c] > out[g * d + c] {
                        out[g * d + c] = row[c];
                        argmax[g * d + c] = r * d + c;
                    }
                }
            }
        }
        let ng = self.ng(x);
        let v = self.push(Tensor::new(vec![groups, d], out)?, Op::MaxPool { x, argmax }, ng);
        Ok((v, valid))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.expect_2d("layer_norm", x)?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", format!("affine params must have {d} values")));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            ng,
        ))
    }

    /// Segmented scaled dot-product attention.
    ///
    /// `q` is `[nq, d]`; `k` is `[np, d]` and `v` is `[np, dv]`, where rows
    /// `offsets[i]..offsets[i + 1]` are the (query-specific) keys and values of
    /// query `i`. Heads split `d` and `dv` evenly; the softmax scale is
    /// `1 / sqrt(d / heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, offsets: Arc<Vec<usize>>, heads: usize) -> Result<Var> {
        let (nq, d) = self.expect_2d("attention", q)?;
        let (np, dk) = self.expect_2d("attention", k)?;
        let (npv, dv) = self.expect_2d("attention", v)?;
        if dk != d || npv != np {
            return Err(Error::shape("attention", format!("q [{nq},{d}], k [{np},{dk}], v [{npv},{dv}]")));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads do not divide {d} / {dv}")));
        }
        if offsets.len() != nq + 1 || offsets[0] != 0 || offsets[nq] != np {
            return Err(Error::shape("attention", "offsets do not cover the key rows"));
        }
        for i in 0..nq {
            if offsets[i + 1] < offsets[i] {
                return Err(Error::shape("attention", "offsets must be non-decreasing"));
            }
            if offsets[i + 1] == offsets[i] {
                return Err(Error::EmptyNeighborhood { query: i });
            }
        }
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.data(q);
        let ks = self.data(k);
        let vs = self.data(v);
        let mut weights = vec![0.0; np * heads];
        let mut out = vec![0.0; nq * dv];
        let mut scores = Vec::new();
        for i in 0..nq {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            for h in 0..heads {
                let qrow = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for p in lo..hi {
                    let s = dot(qrow, &ks[p * d + h * dh..p * d + (h + 1) * dh]) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let orow = &mut out[i * dv + h * dvh..i * dv + (h + 1) * dvh];
                for (p, s) in (lo..hi).zip(&scores) {
                    let w = s / z;
                    weights[p * heads + h] = w;
                    let vrow = &vs[p * dv + h * dvh..p * dv + (h + 1) * dvh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
            }
        }
        self.stats.calls += 1;
        self.stats.weight_entries += np * heads;
        self.stats.pair_rows += np;
        self.stats.buffer_values += np * heads + np * (d + dv);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            offsets,
            heads,
            scale,
            weights,
        };
        Ok(self.push(Tensor::new(vec![nq, dv], out)?, Op::Attention(Box::new(saved)), ng))
    }

    /// Softmax weights recorded by an attention node, laid out `[pair, head]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.weights),
            _ => None,
        }
    }

    /// Weights of the most recently recorded attention node.
    pub fn last_attention_weights(&self) -> Option<&[f64]> {
        self.nodes.iter().rev().find_map(|n| match &n.op {
            Op::Attention(s) => Some(s.weights.as_slice()),
            _ => None,
        })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.expect_2d("log_softmax_rows", x)?;
        let xs = self.data(x);
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::LogSoftmaxRows(x), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// `Σ x ⊙ w` for a constant weight array of the same size.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {} values", w.len(), self.value(x).len())));
        }
        let s = dot(self.data(x), w);
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.to_vec() }, ng))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Runs the reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backprop> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Backprop { grads })
    }

    fn gbuf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[1];
                if let Some(dx) = self.gbuf(grads, *x) {
                    gemm_nt_acc(gd, self.data(*w), dx, n, dout, din);
                }
                if let Some(dw) = self.gbuf(grads, *w) {
                    gemm_tn_acc(self.data(*x), gd, dw, n, din, dout);
                }
                if let Some(b) = b {
                    if let Some(db) = self.gbuf(grads, *b) {
                        for row in gd.chunks_exact(dout.max(1)) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if let Some(da) = self.gbuf(grads, *a) {
                    gemm_nt_acc(gd, self.data(*b), da, n, m, k);
                }
                if let Some(db) = self.gbuf(grads, *b) {
                    gemm_tn_acc(self.data(*a), gd, db, n, k, m);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.gbuf(grads, v) {
                        axpy(d, gd, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.gbuf(grads, *a) {
                    axpy(d, gd, 1.0);
                }
                if let Some(d) = self.gbuf(grads, *b) {
                    axpy(d, gd, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                }
                if let Some(d) = self.gbuf(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] / bv[i];
                    }
                }
                if let Some(d) = self.gbuf(grads, *b) {
                    for i in 0..d.len() {
                        d[i] -= gd[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.gbuf(grads, *a) {
                    axpy(d, gd, *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.gbuf(grads, *a) {
                    axpy(d, gd, 1.0);
                }
            }
            Op::Relu(a) => {
                let av = self.data(*a);
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += gd[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.data(*a);
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * sigmoid(av[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] * out[i];
                    }
                }
            }
            Op::Log(a) => {
                let av = self.data(*a);
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += gd[i] / av[i];
                    }
                }
            }
            Op::Abs(a) => {
                let av = self.data(*a);
                if let Some(d) = self.gbuf(grads, *a) {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += gd[i];
                        } else if av[i] < 0.0 {
                            d[i] -= gd[i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let width = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if let Some(d) = self.gbuf(grads, p) {
                        for r in 0..n {
                            let src = &gd[r * width + offset..r * width + offset + pc];
                            axpy(&mut d[r * pc..(r + 1) * pc], src, 1.0);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.gbuf(grads, p) {
                        axpy(d, &gd[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                if let Some(d) = self.gbuf(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut d[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c], 1.0);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.value.cols();
                if let Some(d) = self.gbuf(grads, *x) {
                    for r in 0..node.value.rows() {
                        axpy(&mut d[r * c + start..r * c + start + len], &gd[r * len..(r + 1) * len], 1.0);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(d) = self.gbuf(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            d[src] += gd[o];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*x)[1];
                let n = inv_std.len();
                let gam = self.data(*gamma);
                if let Some(dg) = self.gbuf(grads, *gamma) {
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(db) = self.gbuf(grads, *beta) {
                    for r in 0..n {
                        axpy(db, &gd[r * d..(r + 1) * d], 1.0);
                    }
                }
                if let Some(dx) = self.gbuf(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for c in 0..d {
                            dxhat[c] = gd[r * d + c] * gam[c];
                            sum += dxhat[c];
                            sum_xh += dxhat[c] * xhat[r * d + c];
                        }
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            dx[r * d + c] += k * (d as f64 * dxhat[c] - sum - xhat[r * d + c] * sum_xh);
                        }
                    }
                }
            }
            Op::Attention(s) => self.backprop_attention(s, gd, grads),
            Op::LogSoftmaxRows(x) => {
                let c = node.value.cols();
                if let Some(d) = self.gbuf(grads, *x) {
                    for r in 0..node.value.rows() {
                        let grow = &gd[r * c..(r + 1) * c];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            d[r * c + j] += grow[j] - out[r * c + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(d) = self.gbuf(grads, *x) {
                    for v in d.iter_mut() {
                        *v += gd[0];
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(d) = self.gbuf(grads, *x) {
                    axpy(d, w, gd[0]);
                }
            }
        }
        Ok(())
    }

    fn backprop_attention(&self, s: &AttentionSaved, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (nq, d) = (self.shape(s.q)[0], self.shape(s.q)[1]);
        let dv = self.shape(s.v)[1];
        let heads = s.heads;
        let (dh, dvh) = (d / heads, dv / heads);
        let (qs, ks, vs) = (self.data(s.q), self.data(s.k), self.data(s.v));
        let need_q = self.ng(s.q);
        let need_k = self.ng(s.k);
        let need_v = self.ng(s.v);
        let mut dq = if need_q { vec![0.0; qs.len()] } else { Vec::new() };
        let mut dk = if need_k { vec![0.0; ks.len()] } else { Vec::new() };
        let mut dvv = if need_v { vec![0.0; vs.len()] } else { Vec::new() };
        let mut ds = Vec::new();
        for i in 0..nq {
            let (lo, hi) = (s.offsets[i], s.offsets[i + 1]);
            for h in 0..heads {
                let grow = &gd[i * dv + h * dvh..i * dv + (h + 1) * dvh];
                ds.clear();
                let mut wdw = 0.0;
                for p in lo..hi {
                    let w = s.weights[p * heads + h];
                    let vrow = &vs[p * dv + h * dvh..p * dv + (h + 1) * dvh];
                    let dw = dot(grow, vrow);
                    wdw += w * dw;
                    ds.push(dw);
                    if need_v {
                        axpy(&mut dvv[p * dv + h * dvh..p * dv + (h + 1) * dvh], grow, w);
                    }
                }
                for (p, dsp) in (lo..hi).zip(ds.iter_mut()) {
                    *dsp = s.weights[p * heads + h] * (*dsp - wdw) * s.scale;
                }
                if need_q {
                    let dqrow = &mut dq[i * d + h * dh..i * d + (h + 1) * dh];
                    for (p, &dsp) in (lo..hi).zip(&ds) {
                        axpy(dqrow, &ks[p * d + h * dh..p * d + (h + 1) * dh], dsp);
                    }
                }
                if need_k {
                    let qrow = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                    for (p, &dsp) in (lo..hi).zip(&ds) {
                        axpy(&mut dk[p * d + h * dh..p * d + (h + 1) * dh], qrow, dsp);
                    }
                }
            }
        }
        for (var, buf) in [(s.q, dq), (s.k, dk), (s.v, dvv)] {
            if let Some(dst) = self.gbuf(grads, var) {
                axpy(dst, &buf, 1.0);
            }
        }
    }
}

/// Gradients from one reverse pass.
pub struct Backprop {
    grads: Vec<Option<Tensor>>,
}

impl Backprop {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound in `graph`; unreached parameters get zeros.
    pub fn param_grads(&self, graph: &Graph) -> Gradients {
        graph
            .params
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
