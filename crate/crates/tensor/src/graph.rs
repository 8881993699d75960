//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation in creation order, which is a
//! topological order by construction. [`Graph::backward_into`] walks the tape
//! backwards from the loss and accumulates into a [`Gradients`] buffer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{dim_err, Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows belonging to one sequence of a ragged batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Which key rows each query row may attend to.
///
/// Query segment `i` attends to key segment `i`. Keys flagged in
/// `key_blocked` receive a `-inf` score; with `causal` set, query `t` of a
/// segment only sees keys `0..=t` of its paired segment.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub query_segments: Vec<Segment>,
    pub key_segments: Vec<Segment>,
    pub causal: bool,
    pub key_blocked: Option<Vec<bool>>,
}

impl AttnLayout {
    pub fn segments_from_lengths(lengths: &[usize]) -> Vec<Segment> {
        let mut start = 0;
        lengths
            .iter()
            .map(|&len| {
                let s = Segment { start, len };
                start += len;
                s
            })
            .collect()
    }

    /// Each sequence attends to itself.
    pub fn self_attention(lengths: &[usize], causal: bool) -> Self {
        let segs = Self::segments_from_lengths(lengths);
        Self {
            query_segments: segs.clone(),
            key_segments: segs,
            causal,
            key_blocked: None,
        }
    }

    /// Sequence `i` of the queries attends to sequence `i` of the keys.
    pub fn cross(query_lengths: &[usize], key_lengths: &[usize]) -> Self {
        Self {
            query_segments: Self::segments_from_lengths(query_lengths),
            key_segments: Self::segments_from_lengths(key_lengths),
            causal: false,
            key_blocked: None,
        }
    }

    pub fn with_blocked_keys(mut self, blocked: Vec<bool>) -> Self {
        self.key_blocked = Some(blocked);
        self
    }

    fn query_rows(&self) -> usize {
        self.query_segments.last().map_or(0, |s| s.start + s.len)
    }

    fn key_rows(&self) -> usize {
        self.key_segments.last().map_or(0, |s| s.start + s.len)
    }

    fn allowed(&self, key_row: usize, q_local: usize, k_local: usize) -> bool {
        if self.causal && k_local > q_local {
            return false;
        }
        !self.key_blocked.as_ref().is_some_and(|b| b[key_row])
    }
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: S,
        probs: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
}

enum Value<S> {
    Owned(Tensor<S>),
    Param(ParamId),
}

struct Node<S> {
    value: Value<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded forward computation.
///
/// Parameters are borrowed from a [`ParamStore`], so several graphs may read
/// the same parameters concurrently.
pub struct Graph<'p, S: Scalar = f32> {
    params: Option<&'p ParamStore<S>>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without a store").get(*id),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input tensor; differentiable when the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.params.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds vector `b` to every row of matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims(a)?;
        let tb = self.value(b);
        if tb.numel() != d {
            return dim_err("add_row", format!("row width {} vs bias {:?}", d, tb.shape()));
        }
        let bias = tb.data();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for r in 0..n {
            for (x, y) in data[r * d..(r + 1) * d].iter_mut().zip(bias) {
                *x += *y;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| *x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(S::zero())).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(a), &[a])
    }

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (n×k) · bᵀ` where `b` is `m×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, k) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (bk, m) = if trans_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return dim_err(
                "matmul",
                format!("inner dimensions {} vs {} (trans_b={})", k, bk, trans_b),
            );
        }
        let mut out = vec![S::zero(); n * m];
        matmul(
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            n,
            k,
            m,
            false,
        );
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x · Wᵀ + b` for `x (n×d_in)`, `W (d_out×d_in)`, `b (d_out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, d_out) = {
            let (r, c) = self.dims(w)?;
            (c, r)
        };
        if self.value(b).numel() != d_out {
            return dim_err(
                "affine",
                format!("bias {:?} vs output width {}", self.value(b).shape(), d_out),
            );
        }
        let xw = self.matmul_nt(x, w)?;
        self.add_row(xw, b)
    }

    /// Selects rows of a matrix, repeating or reordering as requested.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(src)?;
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return dim_err("gather_rows", format!("row {} out of {}", bad, n));
        }
        let ts = self.value(src).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&ts[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            &[src],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = self.dims(a)?;
        let (nb, db) = self.dims(b)?;
        if na != nb {
            return dim_err("concat_cols", format!("row counts {} vs {}", na, nb));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            data.extend_from_slice(&xa[r * da..(r + 1) * da]);
            data.extend_from_slice(&xb[r * db..(r + 1) * db]);
        }
        let out = Tensor::new(vec![na, da + db], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Row-wise normalisation to zero mean and unit variance followed by a
    /// learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims(x)?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return dim_err("layer_norm", format!("gain/bias must have {} entries", d));
        }
        let eps = S::from_f64_lossy(LAYER_NORM_EPS);
        let dn = S::from_usize(d).expect("width");
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![S::zero(); n * d];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    fn last_axis(&self, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        let k = *t.shape().last().unwrap_or(&1);
        if k == 0 {
            return dim_err("softmax", "empty last axis");
        }
        Ok((t.numel() / k, k))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.last_axis(x)?;
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * k..(r + 1) * k]);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, k) = self.last_axis(x)?;
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for r in 0..rows {
            log_softmax_in_place(&mut out[r * k..(r + 1) * k]);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Scaled dot-product attention over a ragged batch, `heads` heads
    /// side by side in the feature dimension. No projections are applied.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q)?;
        let (nk, dk) = self.dims(k)?;
        let (nv, dv) = self.dims(v)?;
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "model width {} not divisible by {} heads",
                d, heads
            )));
        }
        if dk != d || dv != d || nk != nv {
            return dim_err(
                "attention",
                format!("q {}x{}, k {}x{}, v {}x{}", nq, d, nk, dk, nv, dv),
            );
        }
        if layout.query_segments.len() != layout.key_segments.len()
            || layout.query_rows() != nq
            || layout.key_rows() != nk
            || layout.key_blocked.as_ref().is_some_and(|b| b.len() != nk)
        {
            return dim_err("attention", "layout does not match inputs");
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("width").sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let total: usize = layout
            .query_segments
            .iter()
            .zip(&layout.key_segments)
            .map(|(a, b)| heads * a.len * b.len)
            .sum();
        let mut probs = vec![S::zero(); total];
        let mut out = vec![S::zero(); nq * d];
        let mut offset = 0;
        let mut scores = Vec::new();
        for (qseg, kseg) in layout.query_segments.iter().zip(&layout.key_segments) {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..qseg.len {
                    let qrow = &qs[(qseg.start + i) * d + c0..(qseg.start + i) * d + c0 + dh];
                    scores.clear();
                    let mut max = S::neg_infinity();
                    for j in 0..kseg.len {
                        let kr = kseg.start + j;
                        let s = if layout.allowed(kr, i, j) {
                            let krow = &ks[kr * d + c0..kr * d + c0 + dh];
                            dot(qrow, krow) * scale
                        } else {
                            S::neg_infinity()
                        };
                        max = max.max(s);
                        scores.push(s);
                    }
                    let prow = &mut probs[offset + i * kseg.len..offset + (i + 1) * kseg.len];
                    if max == S::neg_infinity() {
                        continue;
                    }
                    let mut z = S::zero();
                    for (p, s) in prow.iter_mut().zip(&scores) {
                        *p = (*s - max).exp();
                        z += *p;
                    }
                    let orow = &mut out[(qseg.start + i) * d + c0..(qseg.start + i) * d + c0 + dh];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p /= z;
                        if *p == S::zero() {
                            continue;
                        }
                        let vrow = &vs[(kseg.start + j) * d + c0..(kseg.start + j) * d + c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += *p * *x;
                        }
                    }
                }
                offset += qseg.len * kseg.len;
            }
        }
        let out = Tensor::new(vec![nq, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// segment by segment, head by head, as `queries × keys` blocks.
    pub fn attention_weights(&self, v: Var) -> Option<&[S]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// with optional label smoothing. An empty batch yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (n, c) = self.dims(logits)?;
        if targets.len() != n {
            return dim_err(
                "cross_entropy",
                format!("{} rows vs {} targets", n, targets.len()),
            );
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return dim_err("cross_entropy", format!("target {} out of {} classes", t, c));
        }
        let eps = S::from_f64_lossy(smoothing);
        let cn = S::from_usize(c).expect("classes");
        let xs = self.value(logits).data();
        let mut probs = xs.to_vec();
        let mut total = S::zero();
        for r in 0..n {
            let row = &mut probs[r * c..(r + 1) * c];
            log_softmax_in_place(row);
            let mut loss = -(S::one() - eps) * row[targets[r]];
            if smoothing > 0.0 {
                loss -= eps / cn * row.iter().copied().sum::<S>();
            }
            total += loss;
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        let value = if n == 0 {
            S::zero()
        } else {
            total / S::from_usize(n).expect("rows")
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.numel().max(1);
        let s = t.data().iter().copied().sum::<S>() / S::from_usize(n).expect("count");
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let inv = S::from_f64_lossy(1.0 / keep);
        let t = self.value(x);
        let mask: Vec<S> = (0..t.numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    inv
                } else {
                    S::zero()
                }
            })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Gradients of `loss` w.r.t. every parameter and `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let mut grads = Gradients::new();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Graph::backward`] but adds onto existing gradients.
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients<S>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut g: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &gout, &mut g, grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, g: &'a mut [Option<Vec<S>>], v: Var) -> Option<&'a mut Vec<S>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(g[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn backward_node(&self, i: usize, gout: &[S], g: &mut [Option<Vec<S>>], grads: &mut Gradients<S>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                let t = self.value(Var(i));
                grads.accumulate_leaf(i, t.shape(), gout);
            }
            Op::Param(id) => {
                let t = self.value(Var(i));
                grads.accumulate_param(*id, t.shape(), gout);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(g, v) {
                        add_into(s, gout);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(s) = self.slot(g, *a) {
                    add_into(s, gout);
                }
                let d = self.value(*b).numel();
                if let Some(s) = self.slot(g, *b) {
                    for row in gout.chunks(d) {
                        add_into(s, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(g, *a) {
                    for ((x, go), y) in s.iter_mut().zip(gout).zip(vb) {
                        *x += *go * *y;
                    }
                }
                if let Some(s) = self.slot(g, *b) {
                    for ((x, go), y) in s.iter_mut().zip(gout).zip(va) {
                        *x += *go * *y;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(g, *a) {
                    for (x, go) in s.iter_mut().zip(gout) {
                        *x += *go * *f;
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                if let Some(s) = self.slot(g, *a) {
                    for ((x, go), y) in s.iter_mut().zip(gout).zip(va) {
                        if *y > S::zero() {
                            *x += *go;
                        }
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (n, k) = self.value(*a).dims2().expect("matrix");
                let m = self.value(Var(i)).dims2().expect("matrix").1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(g, *a) {
                    // da = gout · op(b)ᵀ
                    matmul(gout, false, vb, !*trans_b, s, n, m, k, true);
                }
                if let Some(s) = self.slot(g, *b) {
                    if *trans_b {
                        // b is m×k: db = goutᵀ · a
                        matmul(gout, true, va, false, s, m, n, k, true);
                    } else {
                        // b is k×m: db = aᵀ · gout
                        matmul(va, true, gout, false, s, k, n, m, true);
                    }
                }
            }
            Op::Gather { src, rows } => {
                let d = self.value(*src).dims2().expect("matrix").1;
                if let Some(s) = self.slot(g, *src) {
                    for (r, &row) in rows.iter().enumerate() {
                        add_into(&mut s[row * d..(row + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, da) = self.value(*a).dims2().expect("matrix");
                let db = self.value(*b).dims2().expect("matrix").1;
                let w = da + db;
                if let Some(s) = self.slot(g, *a) {
                    for r in 0..n {
                        add_into(&mut s[r * da..(r + 1) * da], &gout[r * w..r * w + da]);
                    }
                }
                if let Some(s) = self.slot(g, *b) {
                    for r in 0..n {
                        add_into(&mut s[r * db..(r + 1) * db], &gout[r * w + da..(r + 1) * w]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.value(*x).dims2().expect("matrix");
                let gv = self.value(*gain).data();
                if let Some(s) = self.slot(g, *gain) {
                    for r in 0..n {
                        for c in 0..d {
                            s[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(s) = self.slot(g, *bias) {
                    for row in gout.chunks(d) {
                        add_into(s, row);
                    }
                }
                if let Some(s) = self.slot(g, *x) {
                    let dn = S::from_usize(d).expect("width");
                    for r in 0..n {
                        let go = &gout[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for c in 0..d {
                            let dxh = go[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[c];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for c in 0..d {
                            let dxh = go[c] * gv[c];
                            s[r * d + c] += inv_std[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.value(Var(i)).data();
                let k = *self.value(Var(i)).shape().last().unwrap_or(&1);
                if let Some(s) = self.slot(g, *a) {
                    for ((sr, yr), gr) in s.chunks_mut(k).zip(y.chunks(k)).zip(gout.chunks(k)) {
                        let dot = dot(yr, gr);
                        for c in 0..k {
                            sr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = self.value(Var(i)).data();
                let k = *self.value(Var(i)).shape().last().unwrap_or(&1);
                if let Some(s) = self.slot(g, *a) {
                    for ((sr, yr), gr) in s.chunks_mut(k).zip(y.chunks(k)).zip(gout.chunks(k)) {
                        let total = gr.iter().copied().sum::<S>();
                        for c in 0..k {
                            sr[c] += gr[c] - yr[c].exp() * total;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, layout, probs, gout, g),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let n = targets.len();
                if n == 0 {
                    return;
                }
                let c = probs.len() / n;
                let scale = gout[0] / S::from_usize(n).expect("rows");
                let uniform = *smoothing / S::from_usize(c).expect("classes");
                if let Some(s) = self.slot(g, *logits) {
                    for r in 0..n {
                        for j in 0..c {
                            let mut target = uniform;
                            if j == targets[r] {
                                target += S::one() - *smoothing;
                            }
                            s[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(g, *a) {
                    s.iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::Mean(a) => {
                let n = S::from_usize(self.value(*a).numel().max(1)).expect("count");
                if let Some(s) = self.slot(g, *a) {
                    s.iter_mut().for_each(|x| *x += gout[0] / n);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(s) = self.slot(g, *x) {
                    for ((a, go), m) in s.iter_mut().zip(gout).zip(mask) {
                        *a += *go * *m;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[S],
        gout: &[S],
        g: &mut [Option<Vec<S>>],
    ) {
        let d = self.value(q).dims2().expect("matrix").1;
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).expect("width").sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = self.nodes[q.0].requires_grad.then(|| vec![S::zero(); qs.len()]);
        let mut dk = self.nodes[k.0].requires_grad.then(|| vec![S::zero(); ks.len()]);
        let mut dv = self.nodes[v.0].requires_grad.then(|| vec![S::zero(); vs.len()]);
        let mut dscore = Vec::new();
        let mut offset = 0;
        for (qseg, kseg) in layout.query_segments.iter().zip(&layout.key_segments) {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..qseg.len {
                    let qr = qseg.start + i;
                    let go = &gout[qr * d + c0..qr * d + c0 + dh];
                    let prow = &probs[offset + i * kseg.len..offset + (i + 1) * kseg.len];
                    dscore.clear();
                    let mut weighted = S::zero();
                    for (j, p) in prow.iter().enumerate() {
                        let kr = kseg.start + j;
                        let dp = dot(go, &vs[kr * d + c0..kr * d + c0 + dh]);
                        weighted += *p * dp;
                        dscore.push(dp);
                        if let Some(dv) = dv.as_mut() {
                            if *p != S::zero() {
                                for (x, y) in dv[kr * d + c0..kr * d + c0 + dh].iter_mut().zip(go) {
                                    *x += *p * *y;
                                }
                            }
                        }
                    }
                    for (j, p) in prow.iter().enumerate() {
                        if *p == S::zero() {
                            continue;
                        }
                        let kr = kseg.start + j;
                        let ds = *p * (dscore[j] - weighted) * scale;
                        if let Some(dq) = dq.as_mut() {
                            let krow = &ks[kr * d + c0..kr * d + c0 + dh];
                            for (x, y) in dq[qr * d + c0..qr * d + c0 + dh].iter_mut().zip(krow) {
                                *x += ds * *y;
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            let qrow = &qs[qr * d + c0..qr * d + c0 + dh];
                            for (x, y) in dk[kr * d + c0..kr * d + c0 + dh].iter_mut().zip(qrow) {
                                *x += ds * *y;
                            }
                        }
                    }
                }
                offset += qseg.len * kseg.len;
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(grad), Some(s)) = (grad, self.slot(g, var)) {
                add_into(s, &grad);
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}

/// Numerically stable softmax of one slice.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, x| m.max(*x));
    let mut z = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub fn log_softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, x| m.max(*x));
    let lse = max + row.iter().map(|x| (*x - max).exp()).sum::<S>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}
