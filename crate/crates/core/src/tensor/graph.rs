use std::sync::Arc;

use super::{AttentionBias, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed rotation angles for the rotary op: one `(cos, sin)` per
/// token and coordinate pair of a head.
#[derive(Debug, Clone)]
pub struct Rotation<T> {
    pub tokens: usize,
    pub head_dim: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    SwiGlu(Var, Var),
    Rotary {
        x: Var,
        rot: Arc<Rotation<T>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        bias: Arc<AttentionBias>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Post-softmax attention weights recorded by an attention node.
pub struct AttentionProbs<'a, T> {
    pub heads: usize,
    bias: &'a AttentionBias,
    probs: &'a [T],
}

impl<'a, T: Scalar> AttentionProbs<'a, T> {
    pub fn queries(&self) -> usize {
        self.bias.queries()
    }

    pub fn keys(&self) -> usize {
        self.bias.keys()
    }

    /// Visible keys of query `i` and their weights under head `h`.
    pub fn row(&self, h: usize, i: usize) -> (&'a [u32], &'a [T]) {
        let offsets = self.bias.offsets();
        let base = h * self.bias.nnz();
        (
            self.bias.row_keys(i),
            &self.probs[base + offsets[i]..base + offsets[i + 1]],
        )
    }

    pub fn weight(&self, h: usize, i: usize, j: usize) -> T {
        let (keys, w) = self.row(h, i);
        match keys.binary_search(&(j as u32)) {
            Ok(t) => w[t],
            Err(_) => T::zero(),
        }
    }

    /// Dense row of head-averaged weights for query `i`.
    pub fn head_mean_row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.keys()];
        for h in 0..self.heads {
            let (keys, w) = self.row(h, i);
            for (&j, &p) in keys.iter().zip(w) {
                out[j as usize] += p.as_f64();
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    /// Dense row for one head.
    pub fn head_row(&self, h: usize, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.keys()];
        let (keys, w) = self.row(h, i);
        for (&j, &p) in keys.iter().zip(w) {
            out[j as usize] = p.as_f64();
        }
        out
    }
}

/// A tape of tensor operations supporting one reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..n {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if the
    /// node was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x [n, d] + b [d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        let bias = self.value(b);
        if bias.len() != d {
            return Err(Error::shape(format!("row bias of length {} for width {d}", bias.len())));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, &bv) in data[r * d..(r + 1) * d].iter_mut().zip(bias.data()) {
                *o = *o + bv;
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Select rows of a matrix, with repetition. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape(format!("row index {bad} out of range for {n} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows(x, rows), rg))
    }

    /// Stack matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut width = None;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, d) = self.dims2(p)?;
            if *width.get_or_insert(d) != d {
                return Err(Error::shape("concat_rows widths differ"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let d = width.ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x)?;
        if self.value(w).len() != d {
            return Err(Error::shape("rms_norm gain width mismatch"));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = Vec::with_capacity(n * d);
        let mut inv_rms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let ms = dot(row, row) / T::of(d as f64);
            let inv = T::one() / (ms + T::of(eps)).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(ws).map(|(&xv, &wv)| xv * inv * wv));
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let (g, u) = (self.value(gate), self.value(up));
        if g.shape() != u.shape() {
            return Err(Error::shape("swiglu operand shapes differ"));
        }
        let data = g.data().iter().zip(u.data()).map(|(&a, &b)| silu(a) * b).collect();
        let out = Tensor::new(g.shape().to_vec(), data)?;
        let rg = self.rg(&[gate, up]);
        Ok(self.push(out, Op::SwiGlu(gate, up), rg))
    }

    /// Rotate coordinate pairs `(2p, 2p+1)` of every head by the given angles.
    pub fn rotary(&mut self, x: Var, rot: Arc<Rotation<T>>) -> Result<Var> {
        let (n, width) = self.dims2(x)?;
        if n != rot.tokens || rot.head_dim == 0 || width % rot.head_dim != 0 {
            return Err(Error::shape(format!(
                "rotary table for {} tokens / head_dim {} applied to [{n}, {width}]",
                rot.tokens, rot.head_dim
            )));
        }
        let mut data = self.value(x).data().to_vec();
        rotate(&mut data, &rot, width, false);
        let out = Tensor::new(vec![n, width], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rotary { x, rot }, rg))
    }

    /// Multi-head scaled dot-product attention carrying an additive mask.
    ///
    /// `q` is `[nq, heads*dh]`, `k` and `v` are `[nk, heads*dh]`, `bias` is
    /// `nq x nk`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Arc<AttentionBias>,
        heads: usize,
    ) -> Result<Var> {
        let (nq, width) = self.dims2(q)?;
        let (nk, wk) = self.dims2(k)?;
        let (nv, wv) = self.dims2(v)?;
        if wk != width || wv != width || nk != nv {
            return Err(Error::shape(format!(
                "attention operands q[{nq},{width}] k[{nk},{wk}] v[{nv},{wv}]"
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape(format!("width {width} not divisible into {heads} heads")));
        }
        if bias.queries() != nq || bias.keys() != nk {
            return Err(Error::shape(format!(
                "bias is {}x{}, attention is {nq}x{nk}",
                bias.queries(),
                bias.keys()
            )));
        }
        for (name, var) in [("q", q), ("k", k), ("v", v)] {
            if !self.value(var).is_finite() {
                return Err(Error::Numeric(format!("non-finite attention input {name}")));
            }
        }
        let dh = width / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let nnz = bias.nnz();
        let offsets = bias.offsets();
        let mut probs = vec![T::zero(); heads * nnz];
        let mut out = vec![T::zero(); nq * width];
        for h in 0..heads {
            let col = h * dh;
            for i in 0..nq {
                let keys = bias.row_keys(i);
                let p = &mut probs[h * nnz + offsets[i]..h * nnz + offsets[i + 1]];
                let qi = &qs[i * width + col..i * width + col + dh];
                let mut max = T::neg_infinity();
                for (pt, &j) in p.iter_mut().zip(keys) {
                    let j = j as usize;
                    let s = dot(qi, &ks[j * width + col..j * width + col + dh]) * scale;
                    *pt = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut total = T::zero();
                for pt in p.iter_mut() {
                    *pt = (*pt - max).exp();
                    total = total + *pt;
                }
                let inv = T::one() / total;
                let oi = &mut out[i * width + col..i * width + col + dh];
                for (pt, &j) in p.iter_mut().zip(keys) {
                    *pt = *pt * inv;
                    let j = j as usize;
                    axpy(*pt, &vs[j * width + col..j * width + col + dh], oi);
                }
            }
        }
        let out = Tensor::new(vec![nq, width], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                bias,
                probs,
            },
            rg,
        ))
    }

    /// Recorded post-softmax weights of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_, T>> {
        match &self.nodes[v.0].op {
            Op::Attention {
                heads, bias, probs, ..
            } => Some(AttentionProbs {
                heads: *heads,
                bias,
                probs,
            }),
            _ => None,
        }
    }

    /// Mean token cross-entropy over rows with `mask[i] == true`. Masked-out
    /// rows contribute nothing to the value or to the logits gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (t, vocab) = self.dims2(logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::shape(format!(
                "cross entropy over {t} rows given {} targets and {} mask flags",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoSupervisedTokens);
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); t * vocab];
        let mut total = 0.0f64;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vocab {
                return Err(Error::shape(format!("target {} outside vocab {vocab}", targets[i])));
            }
            let row = &xs[i * vocab..(i + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            let mut z = T::zero();
            for (pv, &lv) in p.iter_mut().zip(row) {
                *pv = (lv - max).exp();
                z = z + *pv;
            }
            let inv = T::one() / z;
            p.iter_mut().for_each(|pv| *pv = *pv * inv);
            let logz = max + z.ln();
            total += (logz - row[targets[i]]).as_f64();
        }
        let loss = T::of(total / count as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output. Gradients of every reachable node
    /// that requires grad become available through [`Graph::grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let (before, rest) = self.grads.split_at_mut(idx);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            backward_node(&self.nodes, idx, g, before);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(())
    }
}

fn rotate<T: Scalar>(data: &mut [T], rot: &Rotation<T>, width: usize, inverse: bool) {
    let half = rot.head_dim / 2;
    let heads = width / rot.head_dim;
    for t in 0..rot.tokens {
        let cs = &rot.cos[t * half..(t + 1) * half];
        let sn = &rot.sin[t * half..(t + 1) * half];
        for h in 0..heads {
            let base = t * width + h * rot.head_dim;
            for p in 0..half {
                let (a, b) = (data[base + 2 * p], data[base + 2 * p + 1]);
                let (c, s) = (cs[p], if inverse { -sn[p] } else { sn[p] });
                data[base + 2 * p] = a * c - b * s;
                data[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    idx: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let node = &nodes[idx];
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let len = |v: &Var| nodes[v.0].value.len();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().expect("matrix");
            let n = nodes[b.0].value.dims2().expect("matrix").1;
            if needs(a) {
                // dA = dC @ B^T
                let da = accumulate(&mut grads[a.0], m * k);
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    (n as isize, 1),
                    nodes[b.0].value.data(),
                    (1, n as isize),
                    T::one(),
                    da,
                    (k as isize, 1),
                );
            }
            if needs(b) {
                // dB = A^T @ dC
                let db = accumulate(&mut grads[b.0], k * n);
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    nodes[a.0].value.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    T::one(),
                    db,
                    (n as isize, 1),
                );
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if needs(v) {
                    axpy(T::one(), g, accumulate(&mut grads[v.0], g.len()));
                }
            }
        }
        Op::AddRowBias(x, b) => {
            if needs(x) {
                axpy(T::one(), g, accumulate(&mut grads[x.0], g.len()));
            }
            if needs(b) {
                let d = len(b);
                let db = accumulate(&mut grads[b.0], d);
                for row in g.chunks(d) {
                    axpy(T::one(), row, db);
                }
            }
        }
        Op::Scale(x, s) => {
            if needs(x) {
                axpy(*s, g, accumulate(&mut grads[x.0], g.len()));
            }
        }
        Op::Sum(x) => {
            if needs(x) {
                let n = len(x);
                accumulate(&mut grads[x.0], n)
                    .iter_mut()
                    .for_each(|v| *v = *v + g[0]);
            }
        }
        Op::GatherRows(x, rows) => {
            if needs(x) {
                let d = nodes[x.0].value.dims2().expect("matrix").1;
                let dx = accumulate(&mut grads[x.0], len(x));
                for (o, &r) in rows.iter().enumerate() {
                    axpy(T::one(), &g[o * d..(o + 1) * d], &mut dx[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = len(p);
                if needs(p) {
                    axpy(T::one(), &g[offset..offset + n], accumulate(&mut grads[p.0], n));
                }
                offset += n;
            }
        }
        Op::RmsNorm { x, w, inv_rms } => {
            let (n, d) = nodes[x.0].value.dims2().expect("matrix");
            let xs = nodes[x.0].value.data();
            let ws = nodes[w.0].value.data();
            if needs(w) {
                let dw = accumulate(&mut grads[w.0], d);
                for r in 0..n {
                    let inv = inv_rms[r];
                    for c in 0..d {
                        dw[c] = dw[c] + g[r * d + c] * xs[r * d + c] * inv;
                    }
                }
            }
            if needs(x) {
                let dx = accumulate(&mut grads[x.0], n * d);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..n {
                    let inv = inv_rms[r];
                    let row = &xs[r * d..(r + 1) * d];
                    let mut proj = T::zero();
                    for c in 0..d {
                        dxhat[c] = g[r * d + c] * ws[c];
                        proj = proj + dxhat[c] * row[c] * inv;
                    }
                    let mean = proj / T::of(d as f64);
                    for c in 0..d {
                        let xhat = row[c] * inv;
                        dx[r * d + c] = dx[r * d + c] + inv * (dxhat[c] - xhat * mean);
                    }
                }
            }
        }
        Op::SwiGlu(gate, up) => {
            let gs = nodes[gate.0].value.data();
            let us = nodes[up.0].value.data();
            if needs(gate) {
                let dg = accumulate(&mut grads[gate.0], gs.len());
                for i in 0..gs.len() {
                    let sig = T::one() / (T::one() + (-gs[i]).exp());
                    let dsilu = sig * (T::one() + gs[i] * (T::one() - sig));
                    dg[i] = dg[i] + g[i] * us[i] * dsilu;
                }
            }
            if needs(up) {
                let du = accumulate(&mut grads[up.0], us.len());
                for i in 0..us.len() {
                    du[i] = du[i] + g[i] * silu(gs[i]);
                }
            }
        }
        Op::Rotary { x, rot } => {
            if needs(x) {
                let width = nodes[x.0].value.dims2().expect("matrix").1;
                let mut back = g.to_vec();
                rotate(&mut back, rot, width, true);
                axpy(T::one(), &back, accumulate(&mut grads[x.0], g.len()));
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            bias,
            probs,
        } => {
            let (nq, width) = nodes[q.0].value.dims2().expect("matrix");
            let nk = nodes[k.0].value.dims2().expect("matrix").0;
            let dh = width / heads;
            let scale = T::of(1.0 / (dh as f64).sqrt());
            let (qs, ks, vs) = (
                nodes[q.0].value.data(),
                nodes[k.0].value.data(),
                nodes[v.0].value.data(),
            );
            let nnz = bias.nnz();
            let offsets = bias.offsets();
            let mut dq = vec![T::zero(); nq * width];
            let mut dk = vec![T::zero(); nk * width];
            let mut dv = vec![T::zero(); nk * width];
            let mut ds = Vec::new();
            for h in 0..*heads {
                let col = h * dh;
                for i in 0..nq {
                    let keys = bias.row_keys(i);
                    let p = &probs[h * nnz + offsets[i]..h * nnz + offsets[i + 1]];
                    let gi = &g[i * width + col..i * width + col + dh];
                    ds.clear();
                    let mut weighted = T::zero();
                    for (&pj, &j) in p.iter().zip(keys) {
                        let j = j as usize;
                        let dp = dot(gi, &vs[j * width + col..j * width + col + dh]);
                        ds.push(dp);
                        weighted = weighted + pj * dp;
                        axpy(pj, gi, &mut dv[j * width + col..j * width + col + dh]);
                    }
                    let qi = &qs[i * width + col..i * width + col + dh];
                    for (t, (&pj, &j)) in p.iter().zip(keys).enumerate() {
                        let j = j as usize;
                        let s = pj * (ds[t] - weighted) * scale;
                        axpy(
                            s,
                            &ks[j * width + col..j * width + col + dh],
                            &mut dq[i * width + col..i * width + col + dh],
                        );
                        axpy(s, qi, &mut dk[j * width + col..j * width + col + dh]);
                    }
                }
            }
            for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                if needs(var) {
                    let n = d.len();
                    axpy(T::one(), &d, accumulate(&mut grads[var.0], n));
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            probs,
            count,
        } => {
            if needs(logits) {
                let n = len(logits);
                let vocab = n / targets.len();
                let scale = g[0] / T::of(*count as f64);
                let dl = accumulate(&mut grads[logits.0], n);
                for i in 0..targets.len() {
                    if !mask[i] {
                        continue;
                    }
                    let row = &mut dl[i * vocab..(i + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *d = *d + p * scale;
                    }
                    row[targets[i]] = row[targets[i]] - scale;
                }
            }
        }
    }
}
