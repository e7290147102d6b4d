//! Recorded-tape reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] records each primitive's output together with whatever the
//! backward rule needs. [`Graph::backward`] walks the tape once in reverse and
//! returns first-order gradients for every node that requires them.

use std::sync::Arc;

use super::kernels::{add_into, gemm_nn, gemm_nt, gemm_tn, softmax_row, softmax_row_backward};
use super::ops::{dropout_mask, gelu_grad, gelu_scalar, row_stats};
use super::{Rng, Scalar, Tensor};
use crate::attention::{dense_attention_backward, dense_attention_forward, AttentionShape};
use crate::error::{invalid, shape_err, Error, Result};
use crate::sparse::{sparse_attention_backward, sparse_attention_forward, SparseLayout};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    Scale { a: usize, c: T },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: usize },
    Softmax { x: usize },
    Dropout { x: usize, mask: Vec<T> },
    Gather { table: usize, idx: Vec<usize> },
    Attention { q: usize, k: usize, v: usize, shape: AttentionShape, probs: Vec<T> },
    SparseAttention { q: usize, k: usize, v: usize, heads: usize, layout: Arc<SparseLayout>, probs: Vec<Vec<T>> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
    WeightedSum { x: usize, w: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape for one computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(shape_err(format!("{what} expects a 2-D operand, got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[m, k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (kb, n) = dims2(self.value(b), "matmul")?;
        if k != kb {
            return Err(shape_err(format!("matmul inner extents {k} vs {kb}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0], "matmul")
    }

    /// `a[m, k] · b[n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, kb) = dims2(self.value(b), "matmul_nt")?;
        if k != kb {
            return Err(shape_err(format!("matmul_nt inner extents {k} vs {kb}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a: a.0, b: b.0 }, &[a.0, b.0], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0], "add")
    }

    /// Adds vector `b[n]` to every row of `a[.., n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.len() != n {
            return Err(shape_err(format!("add_row {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, tb.data());
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::AddRow { a: a.0, b: b.0 }, &[a.0, b.0], "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a: a.0, c }, &[a.0], "scale")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.last_dim();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err(format!("layer_norm params do not match last extent {n}")));
        }
        let rows = tx.rows();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let st = row_stats(row, eps);
            rstd.push(st.rstd);
            for j in 0..n {
                let h = (row[j] - st.mean) * st.rstd;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            &[x.0, gamma.0, beta.0],
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu { x: x.0 }, &[x.0], "gelu")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::Softmax { x: x.0 }, &[x.0], "softmax")
    }

    /// Inverted dropout. When inactive (inference or `p == 0`) no node is
    /// recorded and `x` itself is returned, so the identity is exact.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        let n = self.value(x).len();
        match dropout_mask::<T>(n, p, rng, training)? {
            None => Ok(x),
            Some(mask) => {
                let tx = self.value(x);
                let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                let out = Tensor::from_parts(tx.shape().to_vec(), data);
                self.push(out, Op::Dropout { x: x.0, mask }, &[x.0], "dropout")
            }
        }
    }

    /// Rows `idx` of a `[rows, n]` table, stacked into `[idx.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, n) = dims2(tt, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid(format!("row index {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(invalid("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), n], data);
        self.push(out, Op::Gather { table: table.0, idx: idx.to_vec() }, &[table.0], "gather_rows")
    }

    /// Multi-head scaled dot-product self-attention over `[L, H]` projections.
    /// `allowed[i * L + j]` says whether query `i` may attend key `j`; disallowed
    /// pairs get an additive `-1e9` before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allowed: &[bool]) -> Result<Var> {
        let (len, hidden) = dims2(self.value(q), "attention")?;
        if self.value(k).shape() != [len, hidden] || self.value(v).shape() != [len, hidden] {
            return Err(shape_err("attention q/k/v shapes differ"));
        }
        let shape = AttentionShape::new(len, hidden, heads)?;
        if allowed.len() != len * len {
            return Err(shape_err(format!("attention mask has {} entries, expected {}", allowed.len(), len * len)));
        }
        let (out, probs) = dense_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            allowed,
        );
        let out = Tensor::from_parts(vec![len, hidden], out);
        self.push(
            out,
            Op::Attention { q: q.0, k: k.0, v: v.0, shape, probs },
            &[q.0, k.0, v.0],
            "attention",
        )
    }

    /// Block-sparse self-attention restricted to `layout`; `valid[j]` masks keys.
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<SparseLayout>,
        valid: &[bool],
    ) -> Result<Var> {
        let (len, hidden) = dims2(self.value(q), "sparse_attention")?;
        if self.value(k).shape() != [len, hidden] || self.value(v).shape() != [len, hidden] {
            return Err(shape_err("sparse_attention q/k/v shapes differ"));
        }
        let (out, probs) = sparse_attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            AttentionShape::new(len, hidden, heads)?,
            &layout,
            valid,
        )?;
        let out = Tensor::from_parts(vec![len, hidden], out);
        self.push(
            out,
            Op::SparseAttention { q: q.0, k: k.0, v: v.0, heads, layout, probs },
            &[q.0, k.0, v.0],
            "sparse_attention",
        )
    }

    /// Sum over rows of `-log softmax(logits[i])[labels[i]]`, as a `[1]` tensor.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = dims2(tl, "cross_entropy_sum")?;
        if labels.len() != m {
            return Err(shape_err(format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(invalid(format!("label {bad} out of range for {n} classes")));
        }
        let mut probs = tl.data().to_vec();
        let mut total = T::zero();
        for (r, row) in probs.chunks_mut(n).enumerate() {
            let logits_row = tl.row(r);
            let max = logits_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logits_row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - logits_row[labels[r]];
            softmax_row(row);
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            &[logits.0],
            "cross_entropy",
        )
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same shape, as a `[1]` tensor.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != w.shape() {
            return Err(shape_err(format!("weighted_sum {:?} vs {:?}", tx.shape(), w.shape())));
        }
        let total = tx.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum { x: x.0, w: w.data().to_vec() },
            &[x.0],
            "weighted_sum",
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a single-element loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        if grads.iter().flatten().any(|d| d.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::from_parts(n.value.shape().to_vec(), d)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], i: usize, d: Vec<T>) {
        if !self.wants(i) {
            return;
        }
        match &mut grads[i] {
            Some(acc) => add_into(acc, &d),
            slot @ None => *slot = Some(d),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(val(*a), "matmul")?;
                let n = val(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, val(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(val(*a).data(), g, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = dims2(val(*a), "matmul_nt")?;
                let n = val(*b).shape()[0];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g, val(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g, val(*a).data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let n = val(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, g.iter().map(|&x| x * *c).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = val(*gamma).len();
                let gam = val(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); n];
                    for grow in g.chunks(n) {
                        add_into(&mut db, grow);
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let nf = T::of(n as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..n {
                            dx[r * n + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { x } => {
                let d = g.iter().zip(val(*x).data()).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax { x } => {
                let n = node.value.last_dim();
                let mut d = g.to_vec();
                for (drow, prow) in d.chunks_mut(n).zip(node.value.data().chunks(n)) {
                    softmax_row_backward(prow, drow);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &b)| a * b).collect());
            }
            Op::Gather { table, idx } => {
                if self.wants(*table) {
                    let n = val(*table).last_dim();
                    let mut dt = vec![T::zero(); val(*table).len()];
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (dq, dk, dv) =
                    dense_attention_backward(val(*q).data(), val(*k).data(), val(*v).data(), *shape, probs, g);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SparseAttention { q, k, v, heads, layout, probs } => {
                let (len, hidden) = dims2(val(*q), "sparse_attention")?;
                let shape = AttentionShape::new(len, hidden, *heads)?;
                let (dq, dk, dv) = sparse_attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    shape,
                    layout,
                    probs,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = val(*logits).last_dim();
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * n + l] -= T::one();
                }
                for x in &mut d {
                    *x *= g[0];
                }
                self.accumulate(grads, *logits, d);
            }
            Op::WeightedSum { x, w } => {
                self.accumulate(grads, *x, w.iter().map(|&wv| wv * g[0]).collect());
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` requires one and the
    /// loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
