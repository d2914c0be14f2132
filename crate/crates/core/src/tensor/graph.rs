//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Graph`] records every operation of one forward pass as a node in
//! creation order. [`Graph::backward`] walks the nodes in reverse, so gradient
//! accumulation order is fixed by the forward program alone.

use std::borrow::Cow;
use std::ops::Range;

use super::params::{Gradients, ParamId, ParamStore};
use super::{gemm, transpose, Tensor, PROBABILITY_FLOOR};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which rows of a packed `[rows, E]` matrix attend to which.
///
/// Rows of one segment form one sequence, in position order. A row attends to
/// rows of its own segment at or before itself whose key flag is set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    segments: Vec<Range<usize>>,
    key_mask: Vec<bool>,
}

impl AttentionLayout {
    pub fn new(segments: Vec<Range<usize>>, key_mask: Vec<bool>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next || s.end < s.start {
                return Err(Error::Shape(format!("segments must tile rows, got {s:?} at {next}")));
            }
            next = s.end;
        }
        if next != key_mask.len() {
            return Err(Error::Shape(format!("segments cover {next} rows, key mask has {}", key_mask.len())));
        }
        Ok(Self { segments, key_mask })
    }

    /// One sequence with every position attendable.
    pub fn single(len: usize) -> Self {
        Self { segments: vec![0..len], key_mask: vec![true; len] }
    }

    pub fn rows(&self) -> usize {
        self.key_mask.len()
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn key_mask(&self) -> &[bool] {
        &self.key_mask
    }

    fn prob_len(&self, heads: usize) -> usize {
        self.segments.iter().map(|s| heads * tri(s.len())).sum()
    }
}

fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

enum Op {
    Leaf,
    MatMulT { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: AttentionLayout, probs: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, live: Vec<bool> },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<(ParamId, &'a str)>,
}

/// One recorded forward computation.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    clamped: usize,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), clamped: 0 }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Target probabilities raised to the floor by cross-entropy nodes so far.
    pub fn clamped_targets(&self) -> usize {
        self.clamped
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; trainable parameters receive gradients.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some((id, store.name(id)));
        }
        v
    }

    /// `x · wᵀ` for `x: [n, k]`, `w: [m, k]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k) = (xv.rows(), xv.cols());
        let (m, k2) = (wv.rows(), wv.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul_t: [{n}, {k}] · [{m}, {k2}]ᵀ")));
        }
        let out = gemm(xv.data(), &transpose(wv.data(), m, k), n, k, m);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Cow::Owned(Tensor::from_parts(vec![n, m], out)), Op::MatMulT { x, w }, needs))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        if bv.len() != m {
            return Err(Error::Shape(format!("bias of {} for width {m}", bv.len())));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::AddBias { x, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add: {:?} + {:?}", av.shape(), bv.shape())));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::Scale(x, c), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.tanh()).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::Tanh(x), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::Gelu(x), needs)
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.len() != m || bv.len() != m {
            return Err(Error::Shape(format!("layer norm params for width {m}")));
        }
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out[r * m + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::LayerNorm { x, gain, bias, xhat, inv_std }, needs))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let out = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push(Cow::Owned(Tensor::from_parts(shape, out)), Op::Dropout { x, mask }, needs)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, m) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * m);
        for &id in ids {
            if id >= n {
                return Err(Error::Shape(format!("gather index {id} of {n} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![ids.len(), m], out)),
            Op::Gather { table, ids: ids.to_vec() },
            needs,
        ))
    }

    /// Stacks row blocks of equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let width = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| Error::Empty("concat_rows".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != width {
                return Err(Error::Shape(format!("concat_rows width {} vs {width}", pv.cols())));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Cow::Owned(Tensor::from_parts(vec![rows, width], out)), Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(Error::Shape(format!("row {r} of {n}")));
            }
            out.extend_from_slice(xv.row(r));
        }
        let needs = self.needs(x);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![rows.len(), m], out)),
            Op::SelectRows { x, rows: rows.to_vec() },
            needs,
        ))
    }

    /// Multi-head causal self-attention over packed sequences.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: &AttentionLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if rows != layout.rows() {
            return Err(Error::Shape(format!("attention over {rows} rows, layout has {}", layout.rows())));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; layout.prob_len(heads)];
        let mut base = 0;
        for seg in &layout.segments {
            let s = seg.start;
            let len = seg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for qi in 0..len {
                    let i = s + qi;
                    let p = &mut probs[base + h * tri(len) + tri(qi)..][..qi + 1];
                    let qrow = &qd[i * width..][cols.clone()];
                    let mut max = f64::NEG_INFINITY;
                    for kj in 0..=qi {
                        let j = s + kj;
                        if !layout.key_mask[j] {
                            continue;
                        }
                        let krow = &kd[j * width..][cols.clone()];
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += qrow[c] * krow[c];
                        }
                        p[kj] = dot * scale;
                        max = max.max(p[kj]);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut sum = 0.0;
                    for kj in 0..=qi {
                        if layout.key_mask[s + kj] {
                            p[kj] = (p[kj] - max).exp();
                            sum += p[kj];
                        }
                    }
                    let orow = &mut out[i * width..][cols.clone()];
                    for kj in 0..=qi {
                        let j = s + kj;
                        if !layout.key_mask[j] {
                            continue;
                        }
                        p[kj] /= sum;
                        let vrow = &vd[j * width..][cols.clone()];
                        for c in 0..dh {
                            orow[c] += p[kj] * vrow[c];
                        }
                    }
                }
            }
            base += heads * tri(len);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Cow::Owned(Tensor::from_parts(vec![rows, width], out)),
            Op::Attention { q, k, v, heads, layout: layout.clone(), probs },
            needs,
        ))
    }

    /// `Σ_i weights[i] · (−log softmax(logits_i)[targets[i]])` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, m) = (lv.rows(), lv.cols());
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape(format!(
                "cross entropy over {n} rows with {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("cross entropy logits".into()));
        }
        let mut probs = lv.data().to_vec();
        let mut live = vec![true; n];
        let mut loss = 0.0;
        let max_nll = -PROBABILITY_FLOOR.ln();
        let mut clamped = 0;
        for (r, row) in probs.chunks_mut(m).enumerate() {
            let t = targets[r];
            if t >= m {
                return Err(Error::Shape(format!("target {t} of {m} classes")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let z_t = lv.data()[r * m + t];
            let mut nll = sum.ln() + max - z_t;
            if nll > max_nll {
                nll = max_nll;
                live[r] = false;
                clamped += 1;
            }
            loss += weights[r] * nll;
            let inv = 1.0 / sum;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        self.clamped += clamped;
        let needs = self.needs(logits);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, live },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(x), needs)
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar of shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some((id, name)) = node.param {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
                out.accumulate(id, g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.needs(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMulT { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
                if self.needs(*x) {
                    let dx = gemm(g.data(), wv.data(), n, m, k);
                    self.send(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.needs(*w) {
                    let dw = gemm(&transpose(g.data(), n, m), xv.data(), m, n, k);
                    self.send(grads, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(*b) {
                    let m = g.cols();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.send(grads, *b, Tensor::from_parts(shape, db));
                }
                self.send(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Scale(x, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                self.send(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(value.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.send(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gelu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &v)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.send(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let m = g.cols();
                let rows = g.rows();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut dg = vec![0.0; m];
                    for r in 0..rows {
                        for c in 0..m {
                            dg[c] += gd[r * m + c] * xhat[r * m + c];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    self.send(grads, *gain, Tensor::from_parts(shape, dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; m];
                    for r in 0..rows {
                        for c in 0..m {
                            db[c] += gd[r * m + c];
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.send(grads, *bias, Tensor::from_parts(shape, db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mf = m as f64;
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..m {
                            let d = gd[r * m + c] * gain_v[c];
                            sum_d += d;
                            sum_dx += d * xhat[r * m + c];
                        }
                        for c in 0..m {
                            let d = gd[r * m + c] * gain_v[c];
                            dx[r * m + c] = inv_std[r] / mf * (mf * d - sum_d - xhat[r * m + c] * sum_dx);
                        }
                    }
                    self.send(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                self.send(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let m = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..m {
                        dt[id * m + c] += g.data()[r * m + c];
                    }
                }
                self.send(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.needs(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.send(grads, p, Tensor::from_parts(pv.shape().to_vec(), d));
                    }
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let m = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..m {
                        dx[r * m + c] += g.data()[i * m + c];
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Attention { q, k, v, heads, layout, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, layout, probs, &g);
                let shape = g.shape().to_vec();
                self.send(grads, *q, Tensor::from_parts(shape.clone(), dq));
                self.send(grads, *k, Tensor::from_parts(shape.clone(), dk));
                self.send(grads, *v, Tensor::from_parts(shape, dv));
            }
            Op::CrossEntropy { logits, targets, weights, probs, live } => {
                let up = g.data()[0];
                let m = self.value(*logits).cols();
                let mut d = probs.clone();
                for (r, row) in d.chunks_mut(m).enumerate() {
                    if !live[r] {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    row[targets[r]] -= 1.0;
                    let s = up * weights[r];
                    row.iter_mut().for_each(|x| *x *= s);
                }
                let shape = self.value(*logits).shape().to_vec();
                self.send(grads, *logits, Tensor::from_parts(shape, d));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, Tensor::filled(&shape, g.data()[0]));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &Tensor,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let width = g.cols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let gd = g.data();
        let mut dq = vec![0.0; gd.len()];
        let mut dk = vec![0.0; gd.len()];
        let mut dv = vec![0.0; gd.len()];
        let mut dp = Vec::new();
        let mut base = 0;
        for seg in &layout.segments {
            let s = seg.start;
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                for qi in 0..len {
                    let i = s + qi;
                    let p = &probs[base + h * tri(len) + tri(qi)..][..qi + 1];
                    let grow = &gd[i * width + off..i * width + off + dh];
                    dp.clear();
                    dp.resize(qi + 1, 0.0);
                    let mut weighted = 0.0;
                    for kj in 0..=qi {
                        let j = s + kj;
                        if !layout.key_mask[j] {
                            continue;
                        }
                        let vrow = &vd[j * width + off..j * width + off + dh];
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += grow[c] * vrow[c];
                        }
                        dp[kj] = dot;
                        weighted += p[kj] * dot;
                        let dvrow = &mut dv[j * width + off..j * width + off + dh];
                        for c in 0..dh {
                            dvrow[c] += p[kj] * grow[c];
                        }
                    }
                    for kj in 0..=qi {
                        let j = s + kj;
                        if !layout.key_mask[j] {
                            continue;
                        }
                        let ds = p[kj] * (dp[kj] - weighted) * scale;
                        for c in 0..dh {
                            dq[i * width + off + c] += ds * kd[j * width + off + c];
                            dk[j * width + off + c] += ds * qd[i * width + off + c];
                        }
                    }
                }
            }
            base += heads * tri(len);
        }
        (dq, dk, dv)
    }
}
