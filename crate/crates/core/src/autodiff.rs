// SPDX-License-Identifier: MIT OR Apache-2.0

//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive in execution order, so the node list
//! is already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep that visits each node once. Tapes are single-use: build one per
//! forward pass, read values, optionally call `backward`, then drop it.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `a + 1 · b` with `b` a single row broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Relu(NodeId),
    TopKRelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    GatherRows(NodeId, Vec<usize>),
    /// Constant added to selected rows (activation edits).
    AddAtRows(NodeId),
    ScaleColumn {
        x: NodeId,
        col: usize,
        rows: Vec<usize>,
        factor: f64,
    },
    ColNorms(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar seed with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros of the node's shape when the seed does not depend on it.
    pub fn get_or_zeros(&self, tape: &Tape, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        let bias = self.value(row);
        if bias.len() != n {
            return Err(Error::shape(format!("add_row: {n} columns vs bias of {}", bias.len())));
        }
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::shape("mul length mismatch"));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| gelu(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Relu(a))
    }

    /// Per row, keep the `k` largest positive entries and zero the rest.
    pub fn topk_relu(&mut self, a: NodeId, k: usize) -> NodeId {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        let mut idx: Vec<usize> = Vec::with_capacity(n);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            idx.clear();
            idx.extend(0..n);
            // Ties broken by index for determinism.
            idx.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            for &i in idx.iter().take(k) {
                if row[i] > 0.0 {
                    out[r * n + i] = row[i];
                }
            }
        }
        self.push(Tensor::from_parts(vec![m, n], out), Op::TopKRelu(a))
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != n || b.len() != n {
            return Err(Error::shape("layer_norm gain/bias width"));
        }
        let src = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row softmax over a square score matrix with entries above the
    /// diagonal masked out (position `i` attends to `0..=i`).
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims(a);
        if m != n {
            return Err(Error::shape("causal_softmax needs a square matrix"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..i * n + i + 1];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for v in &mut out[i * n..i * n + i + 1] {
                *v /= z;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::CausalSoftmax(a)))
    }

    /// Mean next-token cross-entropy of `logits` rows against `targets`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims(logits);
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::shape("cross_entropy targets"));
        }
        let probs = softmax_rows(self.value(logits).data(), m, n);
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(r, &t)| probs[r * n + t].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Rows `indices` of `table`, in order (duplicates allowed).
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::shape(format!("gather row {bad} of {m}")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(src.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), n], out),
            Op::GatherRows(table, indices.to_vec()),
        ))
    }

    /// `x` with `delta` added to each row listed in `rows`.
    pub fn add_at_rows(&mut self, x: NodeId, rows: &[usize], delta: &[f64]) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if delta.len() != n || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("add_at_rows"));
        }
        let mut v = self.value(x).clone();
        for &r in rows {
            for (o, d) in v.row_mut(r).iter_mut().zip(delta) {
                *o += d;
            }
        }
        Ok(self.push(v, Op::AddAtRows(x)))
    }

    /// `x` with column `col` multiplied by `factor` on the listed rows.
    pub fn scale_column(&mut self, x: NodeId, col: usize, rows: &[usize], factor: f64) -> Result<NodeId> {
        let (m, n) = self.dims(x);
        if col >= n || rows.iter().any(|&r| r >= m) {
            return Err(Error::shape("scale_column"));
        }
        let mut v = self.value(x).clone();
        for &r in rows {
            v.data_mut()[r * n + col] *= factor;
        }
        Ok(self.push(
            v,
            Op::ScaleColumn {
                x,
                col,
                rows: rows.to_vec(),
                factor,
            },
        ))
    }

    /// L2 norm of each column, as a `1 × cols` row.
    pub fn col_norms(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += src[r * n + c] * src[r * n + c];
            }
        }
        for v in &mut out {
            *v = v.sqrt();
        }
        self.push(Tensor::from_parts(vec![1, n], out), Op::ColNorms(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.value(seed).len() != 1 {
            return Err(Error::NonScalarSeed(seed.0));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![1.0]);

        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(grads.len());
        for (id, g) in grads.into_iter().enumerate() {
            out.push(g.map(|data| Tensor::from_parts(self.nodes[id].value.shape().to_vec(), data)));
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let zeros = |id: NodeId| vec![0.0; self.value(id).len()];
        macro_rules! acc {
            ($id:expr) => {{
                let id: NodeId = $id;
                if grads[id.0].is_none() {
                    grads[id.0] = Some(zeros(id));
                }
                grads[id.0].as_mut().unwrap()
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                matmul_nt_acc(g, vb, m, n, k, acc!(*a));
                matmul_tn_acc(va, g, m, k, n, acc!(*b));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                matmul_acc(g, vb, m, n, k, acc!(*a));
                matmul_tn_acc(g, va, m, n, k, acc!(*b));
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                for (o, v) in acc!(*b).iter_mut().zip(g) {
                    *o -= v;
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc!(*a), g);
                let n = self.dims(*a).1;
                let gb = acc!(*row);
                for chunk in g.chunks(n) {
                    add_into(gb, chunk);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                for ((o, gi), y) in acc!(*a).iter_mut().zip(g).zip(vb) {
                    *o += gi * y;
                }
                for ((o, gi), x) in acc!(*b).iter_mut().zip(g).zip(va) {
                    *o += gi * x;
                }
            }
            Op::Scale(a, s) => {
                for (o, gi) in acc!(*a).iter_mut().zip(g) {
                    *o += gi * s;
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                for ((o, gi), xi) in acc!(*a).iter_mut().zip(g).zip(x) {
                    *o += gi * gelu_grad(*xi);
                }
            }
            Op::Relu(a) | Op::TopKRelu(a) => {
                let y = node.value.data();
                for ((o, gi), yi) in acc!(*a).iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *o += gi;
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
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data().to_vec();
                {
                    let gg = acc!(*gain);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let gb = acc!(*bias);
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                }
                let gx = acc!(*x);
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..n {
                        dxhat[c] = g[r * n + c] * gv[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xhat[r * n + c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        gx[r * n + c] +=
                            inv_std[r] / nf * (nf * dxhat[c] - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                let (m, n) = self.dims(*a);
                let y = node.value.data();
                let ga = acc!(*a);
                for i in 0..m {
                    let dot: f64 = (0..=i).map(|j| y[i * n + j] * g[i * n + j]).sum();
                    for j in 0..=i {
                        ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                let scale = g[0] / m as f64;
                let gl = acc!(*logits);
                for r in 0..m {
                    for c in 0..n {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        gl[r * n + c] += scale * (probs[r * n + c] - onehot);
                    }
                }
            }
            Op::Sum(a) => {
                for o in acc!(*a).iter_mut() {
                    *o += g[0];
                }
            }
            Op::GatherRows(table, indices) => {
                let n = self.dims(*table).1;
                let gt = acc!(*table);
                for (k, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                }
            }
            Op::AddAtRows(x) => add_into(acc!(*x), g),
            Op::ScaleColumn { x, col, rows, factor } => {
                let n = self.dims(*x).1;
                let gx = acc!(*x);
                let mut scaled = g.to_vec();
                for &r in rows {
                    scaled[r * n + col] *= factor;
                }
                add_into(gx, &scaled);
            }
            Op::ColNorms(a) => {
                let (m, n) = self.dims(*a);
                let va = self.value(*a).data();
                let norms = node.value.data();
                let ga = acc!(*a);
                for r in 0..m {
                    for c in 0..n {
                        if norms[c] > 0.0 {
                            ga[r * n + c] += g[c] * va[r * n + c] / norms[c];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_rows(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &src[r * n..(r + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mx).exp();
            z += *o;
        }
        for o in &mut out[r * n..(r + 1) * n] {
            *o /= z;
        }
    }
    out
}
