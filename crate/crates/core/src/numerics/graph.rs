//! Reverse-mode tape over a closed set of primitives.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` walks it once in reverse.

use super::kernels::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<T>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Confined to one thread; values are immutable once
/// recorded.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn dims2(t: &Tensor<impl Scalar>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulT(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for {cols} columns", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, s), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for rank {}", shape.len()),
            ));
        }
        if !self.value(x).is_finite() {
            return Err(Error::Numeric("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.value(x).data().to_vec();
        let mut lane = vec![T::zero(); axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                for (a, l) in lane.iter_mut().enumerate() {
                    *l = data[base + a * inner];
                }
                kernels::softmax_row(&mut lane);
                for (a, l) in lane.iter().enumerate() {
                    data[base + a * inner] = *l;
                }
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            &[x],
        ))
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x));
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape("layer_norm", "gamma/beta do not match last dim"));
        }
        let eps = T::lit(eps);
        let n = T::lit(cols as f64);
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); rows * cols];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().fold(T::zero(), |a, v| a + v) / n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, v| a + v)
                / n;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table));
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} >= vocab {v}")));
        }
        let tab = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tab.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (t, v) = dims2(self.value(logits));
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {t} rows", targets.len()),
            ));
        }
        if !self.value(logits).is_finite() {
            return Err(Error::Numeric("cross_entropy"));
        }
        let mut count = 0usize;
        let mut total = T::zero();
        let mut probs = self.value(logits).data().to_vec();
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            if tgt == ignore_index {
                row.iter_mut().for_each(|p| *p = T::zero());
                continue;
            }
            if tgt >= v {
                return Err(Error::shape("cross_entropy", format!("target {tgt} >= {v}")));
            }
            let lse = kernels::log_sum_exp(row);
            total = total + (lse - row[tgt]);
            kernels::softmax_row(row);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Domain("cross_entropy: every target is ignored".into()));
        }
        let loss = Tensor::scalar(total / T::lit(count as f64));
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `T×D`, `k`/`v` are
    /// `S×D`; `D` is split evenly across `heads`. With `causal`, query `i`
    /// only sees keys `j <= i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, dm) = dims2(self.value(q));
        let (sk, dk) = dims2(self.value(k));
        let (sv, dv) = dims2(self.value(v));
        if dk != dm || dv != dm || sk != sv {
            return Err(Error::shape("attention", "q/k/v widths or lengths differ"));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads for width {dm}")));
        }
        if causal && tq != sk {
            return Err(Error::shape("attention", "causal attention needs square scores"));
        }
        let dh = dm / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * tq * sk];
        let mut out = vec![T::zero(); tq * dm];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let visible = if causal { i + 1 } else { sk };
                let prow = &mut probs[(h * tq + i) * sk..(h * tq + i + 1) * sk];
                let qi = &qd[i * dm + off..i * dm + off + dh];
                for j in 0..visible {
                    prow[j] = dot(qi, &kd[j * dm + off..j * dm + off + dh]) * scale;
                }
                kernels::softmax_row(&mut prow[..visible]);
                let orow = &mut out[i * dm + off..i * dm + off + dh];
                for j in 0..visible {
                    axpy(prow[j], &vd[j * dm + off..j * dm + off + dh], orow);
                }
            }
        }
        let t = Tensor::new(vec![tq, dm], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Stacks 2-D values with a common width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("width {} vs {cols}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(x));
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("select_rows", format!("rows {rows:?} of {r}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().fold(T::zero(), |a, v| a + v);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.value(x).data().iter().copied().fold(T::zero(), |a, v| a + v);
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, $v, self.value($v).numel())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if self.wants(*a) {
                    gemm_nt(g, self.value(*b).data(), slot!(*a), m, n, k);
                }
                if self.wants(*b) {
                    gemm_tn(self.value(*a).data(), g, slot!(*b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                if self.wants(*a) {
                    gemm_nn(g, self.value(*b).data(), slot!(*a), m, n, k);
                }
                if self.wants(*b) {
                    gemm_tn(g, self.value(*a).data(), slot!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        axpy(T::one(), g, slot!(v));
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    axpy(T::one(), g, slot!(*x));
                }
                if self.wants(*bias) {
                    let cols = self.value(*bias).numel();
                    let gb = slot!(*bias);
                    for row in g.chunks_exact(cols) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = self.value(*b).data();
                    let ga = slot!(*a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * other[i];
                    }
                }
                if self.wants(*b) {
                    let other = self.value(*a).data();
                    let gb = slot!(*b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * other[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    axpy(*s, g, slot!(*x));
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if self.wants(*x) {
                    let y = node.value.data();
                    let gx = slot!(*x);
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * axis_len * inner + i;
                            let mut s = T::zero();
                            for a in 0..*axis_len {
                                let idx = base + a * inner;
                                s = s + g[idx] * y[idx];
                            }
                            for a in 0..*axis_len {
                                let idx = base + a * inner;
                                gx[idx] = gx[idx] + y[idx] * (g[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (rows, cols) = dims2(self.value(*x));
                let xd = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let n = T::lit(cols as f64);
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        xhat[c] = (xd[r * cols + c] - mean[r]) * rstd[r];
                        dxhat[c] = gr[c] * gam[c];
                    }
                    if self.wants(*gamma) {
                        let gg = slot!(*gamma);
                        for c in 0..cols {
                            gg[c] = gg[c] + gr[c] * xhat[c];
                        }
                    }
                    if self.wants(*beta) {
                        axpy(T::one(), gr, slot!(*beta));
                    }
                    if self.wants(*x) {
                        let m1 = dxhat.iter().copied().fold(T::zero(), |a, v| a + v) / n;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .fold(T::zero(), |a, (&d, &h)| a + d * h)
                            / n;
                        let gx = slot!(*x);
                        for c in 0..cols {
                            gx[r * cols + c] =
                                gx[r * cols + c] + rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let gx = slot!(*x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * kernels::gelu_grad(xd[i]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = self.value(*table).cols();
                    let gt = slot!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / T::lit(*count as f64);
                    let gl = slot!(*logits);
                    for (r, &tgt) in targets.iter().enumerate() {
                        if tgt == *ignore_index {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        axpy(scale, &probs[r * v..(r + 1) * v], row);
                        row[tgt] = row[tgt] - scale;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, *causal, probs, grads),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        axpy(T::one(), &g[off..off + len], slot!(p));
                    }
                    off += len;
                }
            }
            Op::SelectRows { x, rows } => {
                if self.wants(*x) {
                    let c = self.value(*x).cols();
                    let gx = slot!(*x);
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(T::one(), &g[r * c..(r + 1) * c], &mut gx[src * c..(src + 1) * c]);
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    slot!(*x).iter_mut().for_each(|v| *v = *v + g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let s = g[0] / T::lit(self.value(*x).numel() as f64);
                    slot!(*x).iter_mut().for_each(|v| *v = *v + s);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, dm) = dims2(self.value(q));
        let sk = self.value(k).rows();
        let dh = dm / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::zero(); tq * dm];
        let mut gk = vec![T::zero(); sk * dm];
        let mut gv = vec![T::zero(); sk * dm];
        let mut dp = vec![T::zero(); sk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..tq {
                let visible = if causal { i + 1 } else { sk };
                let prow = &probs[(h * tq + i) * sk..(h * tq + i) * sk + visible];
                let go = &g[i * dm + off..i * dm + off + dh];
                let mut s = T::zero();
                for j in 0..visible {
                    dp[j] = dot(go, &vd[j * dm + off..j * dm + off + dh]);
                    s = s + dp[j] * prow[j];
                    axpy(prow[j], go, &mut gv[j * dm + off..j * dm + off + dh]);
                }
                let qi = &qd[i * dm + off..i * dm + off + dh];
                for j in 0..visible {
                    let ds = prow[j] * (dp[j] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    axpy(ds, &kd[j * dm + off..j * dm + off + dh], &mut gq[i * dm + off..i * dm + off + dh]);
                    axpy(ds, qi, &mut gk[j * dm + off..j * dm + off + dh]);
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                axpy(T::one(), &buf, grad_slot(grads, var, buf.len()));
            }
        }
    }
}
