//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. Leaf gradients persist on the graph and accumulate
//! across calls; intermediate gradients are freed as the walk proceeds. A
//! graph is meant to live for one forward/backward pass and then be dropped.

use super::kernels::{self, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const RMS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    FrobeniusSq(Var),
    Mean(Var),
    Sum(Var),
    CausalAttention {
        qkv: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        let shape = self.nodes[v.0].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad matches value shape"))
    }

    /// Borrowing form of [`Graph::grad`].
    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0)?.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(
                op_name,
                format!("{sa:?} with {sb:?} (rhs must match trailing dimensions of lhs)"),
            ));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if kind == BinaryKind::Div && xb.iter().any(|&d| d == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let nb = xb.len();
        let out: Vec<f64> = xa
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = xb[i % nb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), rg))
    }

    /// Elementwise sum; `b` may broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let width = x.shape().last().copied().unwrap_or(1);
        if width == 0 || x.numel() == 0 {
            return Err(Error::domain("softmax_rows", "empty rows"));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows(a), rg))
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let d = xv.shape().last().copied().unwrap_or(1);
        if gv.shape() != [d] || d == 0 {
            return Err(Error::dim(
                "rmsnorm",
                format!("input {:?} with gain {:?}", xv.shape(), gv.shape()),
            ));
        }
        let g = gv.data();
        let mut out = vec![0.0; xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.numel() / d);
        for (row, orow) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            for j in 0..d {
                orow[j] = row[j] * r * g[j];
            }
            inv_rms.push(r);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Gathers rows of `table` (`V×d`) by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2("embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::domain(
                "embedding_lookup",
                format!("index {bad} outside table of {v} rows"),
            ));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2("cross_entropy_rows")?;
        if v == 0 || n == 0 {
            return Err(Error::domain("cross_entropy_rows", "empty rows"));
        }
        if targets.len() != n {
            return Err(Error::dim(
                "cross_entropy_rows",
                format!("{n} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::domain(
                "cross_entropy_rows",
                format!("target {bad} outside vocabulary of {v}"),
            ));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * v];
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let row = &x[r * v..(r + 1) * v];
            let lse = kernels::log_sum_exp(row);
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            out.push(lse - row[targets[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of squared entries, as a scalar.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Multi-head causal self-attention on a fused `[B·T, 3d]` projection laid
    /// out as `[Q | K | V]`; returns `[B·T, d]`. Position `t` of each length-`T`
    /// sequence attends to positions `0..=t` of the same sequence only.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let (rows, cols) = self.value(qkv).dims2("causal_attention")?;
        if cols % 3 != 0 || heads == 0 || (cols / 3) % heads != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("width {cols} is not 3·heads·head_dim for {heads} heads"),
            ));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("{rows} rows are not a whole number of length-{seq_len} sequences"),
            ));
        }
        let d = cols / 3;
        let dh = d / heads;
        let batch = rows / seq_len;
        let t = seq_len;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * cols + h * dh;
                let qv = View {
                    offset: base,
                    row_stride: cols,
                    col_stride: 1,
                };
                let kv = qv.at(base + d);
                let vv = qv.at(base + 2 * d);
                let p_off = (b * heads + h) * t * t;
                let pv = View::row_major(t).at(p_off);
                kernels::gemm(t, dh, t, scale, x, qv, x, kv.transposed(), 0.0, &mut probs, pv);
                for i in 0..t {
                    let row = &mut probs[p_off + i * t..p_off + (i + 1) * t];
                    let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row[..=i].iter_mut() {
                        *v = (*v - max).exp();
                        s += *v;
                    }
                    row[..=i].iter_mut().for_each(|v| *v /= s);
                    row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
                }
                let ov = View {
                    offset: b * t * d + h * dh,
                    row_stride: d,
                    col_stride: 1,
                };
                kernels::gemm(t, t, dh, 1.0, &probs, pv, x, vv, 0.0, &mut out, ov);
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::CausalAttention {
                qkv,
                heads,
                seq_len,
                probs,
            },
            rg,
        ))
    }

    // ----- reverse pass -----------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every trainable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Contract(
                "backward: loss does not depend on any trainable tensor".into(),
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[idx] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        kernels::matmul(m, n, k, &g, false, nodes[b.0].value.data(), true, da, 1.0);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        kernels::matmul(k, m, n, nodes[a.0].value.data(), true, &g, false, db, 1.0);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let xa = nodes[a.0].value.data();
                    let xb = nodes[b.0].value.data();
                    let nb = xb.len();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[i],
                                BinaryKind::Mul => g[i] * xb[i % nb],
                                BinaryKind::Div => g[i] / xb[i % nb],
                            };
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for (i, &gi) in g.iter().enumerate() {
                            let j = i % nb;
                            db[j] += match kind {
                                BinaryKind::Add => gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * xa[i],
                                BinaryKind::Div => -gi * xa[i] / (xb[j] * xb[j]),
                            };
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, gi)| *d += c * gi);
                    }
                }
                Op::Transpose(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let y = node.value.data();
                        let w = node.value.shape().last().copied().unwrap_or(1);
                        for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(da.chunks_mut(w)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..w {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = nodes[x.0].value.data();
                    let gv = nodes[gain.0].value.data();
                    let d = gv.len();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (r, &ir) in inv_rms.iter().enumerate() {
                            let row = &xv[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let dot: f64 = (0..d).map(|j| gv[j] * gr[j] * row[j]).sum();
                            let k = ir * ir * ir * dot / d as f64;
                            for j in 0..d {
                                dx[r * d + j] += ir * gv[j] * gr[j] - k * row[j];
                            }
                        }
                    }
                    if let Some(dg) = slot(&mut grads, nodes, *gain) {
                        for (r, &ir) in inv_rms.iter().enumerate() {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xv[r * d + j] * ir;
                            }
                        }
                    }
                }
                Op::Gelu(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let xv = nodes[a.0].value.data();
                        for i in 0..da.len() {
                            da[i] += g[i] * kernels::gelu_grad(xv[i]);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(dt) = slot(&mut grads, nodes, *table) {
                        let d = nodes[table.0].value.shape()[1];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    probs,
                } => {
                    if let Some(dl) = slot(&mut grads, nodes, *logits) {
                        let v = nodes[logits.0].value.shape()[1];
                        for (r, &t) in targets.iter().enumerate() {
                            for j in 0..v {
                                dl[r * v + j] += g[r] * probs[r * v + j];
                            }
                            dl[r * v + t] -= g[r];
                        }
                    }
                }
                Op::FrobeniusSq(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let xv = nodes[a.0].value.data();
                        da.iter_mut().zip(xv).for_each(|(d, x)| *d += 2.0 * g[0] * x);
                    }
                }
                Op::Mean(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let s = g[0] / da.len() as f64;
                        da.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::CausalAttention {
                    qkv,
                    heads,
                    seq_len,
                    probs,
                } => {
                    if let Some(dqkv) = slot(&mut grads, nodes, *qkv) {
                        attention_backward(
                            nodes[qkv.0].value.data(),
                            nodes[qkv.0].value.shape()[1],
                            *heads,
                            *seq_len,
                            probs,
                            &g,
                            dqkv,
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

/// Transient gradient buffer for `v`, allocated on first use; `None` when `v`
/// needs no gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn attention_backward(
    x: &[f64],
    cols: usize,
    heads: usize,
    t: usize,
    probs: &[f64],
    g: &[f64],
    dx: &mut [f64],
) {
    let d = cols / 3;
    let dh = d / heads;
    let batch = x.len() / cols / t;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t * t];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * t * cols + h * dh;
            let qv = View {
                offset: base,
                row_stride: cols,
                col_stride: 1,
            };
            let kv = qv.at(base + d);
            let vv = qv.at(base + 2 * d);
            let p_off = (b * heads + h) * t * t;
            let pv = View::row_major(t).at(p_off);
            let gv = View {
                offset: b * t * d + h * dh,
                row_stride: d,
                col_stride: 1,
            };
            // dV += Pᵀ G
            kernels::gemm(t, t, dh, 1.0, probs, pv.transposed(), g, gv, 1.0, dx, vv);
            // dP = G Vᵀ
            kernels::gemm(t, dh, t, 1.0, g, gv, x, vv.transposed(), 0.0, &mut dp, View::row_major(t));
            // dS = P ⊙ (dP − rowsum(P ⊙ dP)); entries above the diagonal have P = 0.
            for i in 0..t {
                let prow = &probs[p_off + i * t..p_off + i * t + i + 1];
                let drow = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(p, q)| p * q).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
                drow[i + 1..].iter_mut().for_each(|v| *v = 0.0);
            }
            // dQ += scale · dS K ; dK += scale · dSᵀ Q
            kernels::gemm(t, t, dh, scale, &dp, View::row_major(t), x, kv, 1.0, dx, qv);
            kernels::gemm(t, t, dh, scale, &dp, View::row_major(t).transposed(), x, qv, 1.0, dx, kv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::gradcheck;

    const H: f64 = 1e-5;

    fn rt(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut SplitMix64::new(seed))
    }

    #[test]
    fn frobenius_of_three_four() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let f = g.frobenius_sq(x);
        assert_eq!(g.scalar(f), 25.0);
    }

    #[test]
    fn matmul_identity_is_bitwise() {
        let x = rt(&[6, 4], 1);
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let i = g.constant(Tensor::eye(4));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 7]));
        let ce = g.cross_entropy_rows(l, &[0, 3, 6]).unwrap();
        for &v in g.value(ce).data() {
            assert!((v - 7f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_square_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap());
        let f = g.frobenius_sq(x);
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0]);
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -8.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.param(rt(&[2, 2], 3));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let c = g.constant(rt(&[2, 2], 4));
        let f = g.frobenius_sq(c);
        assert!(matches!(g.backward(f), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_of_matmul_matches_finite_differences() {
        let b = rt(&[3, 3], 8);
        let err = gradcheck(
            |g, a| {
                let bb = g.constant(b.clone());
                let y = g.matmul(a, bb)?;
                g.mean(y)
            },
            &rt(&[3, 3], 7),
            H,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradcheck_examples() {
        let e = gradcheck(|g, x| Ok(g.frobenius_sq(x)), &rt(&[4, 3], 2), H).unwrap();
        assert!(e < 1e-8, "{e}");
        let targets = [1usize, 6];
        let e = gradcheck(
            |g, x| {
                let ce = g.cross_entropy_rows(x, &targets)?;
                g.mean(ce)
            },
            &rt(&[2, 8], 5),
            H,
        )
        .unwrap();
        assert!(e < 1e-6, "{e}");
        let c = gradcheck(|g, _x| Ok(g.constant(Tensor::scalar(3.0))), &rt(&[2], 1), H).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn gradcheck_rejects_non_scalar() {
        assert!(matches!(
            gradcheck(|_g, x| Ok(x), &rt(&[2, 2], 1), H),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(rt(&[2, 3], 1));
        let b = g.constant(rt(&[2, 3], 2));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(rt(&[2], 3));
        assert!(g.add(a, c).is_err());
        let e = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax_rows(e), Err(Error::Domain { .. })));
        assert!(matches!(g.cross_entropy_rows(e, &[0, 0]), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_rows_are_positive_and_normalized() {
        let mut g = Graph::new();
        let x = g.constant(rt(&[5, 9], 4).map(|v| 30.0 * v));
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(9) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_output_rms_equals_gain() {
        let mut g = Graph::new();
        let x = g.constant(rt(&[4, 16], 9));
        let gain = g.constant(Tensor::full(&[16], 1.7));
        let y = g.rmsnorm(x, gain).unwrap();
        for row in g.value(y).data().chunks(16) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
            assert!((rms - 1.7).abs() < 1e-10);
        }
    }


    #[test]
    fn every_primitive_passes_gradcheck() {
        for (name, err) in crate::tensor::primitive_gradchecks() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn attention_is_causal() {
        let base = rt(&[6, 12], 21);
        let mut changed = base.clone();
        // perturb position 4 (and 5) of the single sequence
        for j in 0..12 {
            changed.data_mut()[4 * 12 + j] += 1.0;
            changed.data_mut()[5 * 12 + j] -= 0.5;
        }
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.constant(t);
            let y = g.causal_attention(x, 2, 6).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(base), run(changed));
        assert_eq!(a.data()[..4 * 4], b.data()[..4 * 4]);
        assert_ne!(a.data()[4 * 4..], b.data()[4 * 4..]);
    }

    #[test]
    fn attention_matches_primitive_composition() {
        // One sequence, one head: softmax(mask(QKᵀ/√d)) V built from primitives.
        let t = 5;
        let d = 4;
        let x = rt(&[t, 3 * d], 33);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fused = g.causal_attention(xv, 1, t).unwrap();
        let cols = |lo: usize| {
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|i| (0..d).map(|j| x.get2(i, lo + j)).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let q = g.constant(cols(0));
        let k = g.constant(cols(d));
        let v = g.constant(cols(2 * d));
        let kt = g.transpose(k).unwrap();
        let s = g.matmul(q, kt).unwrap();
        let s = g.scale(s, 1.0 / (d as f64).sqrt());
        let mut mask = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in i + 1..t {
                mask.data_mut()[i * t + j] = -1e300;
            }
        }
        let m = g.constant(mask);
        let s = g.add(s, m).unwrap();
        let p = g.softmax_rows(s).unwrap();
        let o = g.matmul(p, v).unwrap();
        assert!(g.value(o).max_abs_diff(g.value(fused)) < 1e-14);
    }
}
