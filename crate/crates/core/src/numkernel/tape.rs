//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to apply its local gradient rule. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and `backward`
//! is a single reverse sweep.

use std::sync::Arc;

use super::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::tensor::Tensor;
use crate::error::{contract, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Vec<T>),
    Gelu(NodeId),
    SoftmaxRows(NodeId, T),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spans: Vec<usize>,
        heads: usize,
        scale: T,
        probs: Vec<T>,
        mask: Option<Vec<T>>,
    },
    Gather(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Reshape(NodeId),
    MeanRows(NodeId),
    GroupReduce {
        x: NodeId,
        group: usize,
        mode: Reduce,
        argmax: Vec<usize>,
    },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: NodeId,
        labels: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Tape<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf: receives a gradient in `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> NodeId {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Constant leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> NodeId {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 || k != k2 {
            return shape_err(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        if self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 || k != k2 {
            return shape_err(format!(
                "matmul_bt {:?} x {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return shape_err(format!(
                "add_row {:?} + {:?}",
                self.value(a).shape(),
                self.value(row).shape()
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| *x + *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "mul {:?} * {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| *x * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let v = self.value(a);
        if mask.len() != v.numel() {
            return shape_err("mask length differs from tensor size");
        }
        let data = v.data().iter().zip(&mask).map(|(x, m)| *x * *m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::MulConst(a, mask), rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = v.data().iter().map(|x| kernels::gelu(*x)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row-wise softmax of `x / temperature` over the last dimension.
    pub fn softmax_rows(&mut self, x: NodeId, temperature: T) -> Result<NodeId> {
        if !(temperature > T::zero()) {
            return contract("softmax temperature must be positive");
        }
        let v = self.value(x);
        if v.cols() == 0 {
            return shape_err("softmax over an empty dimension");
        }
        if v.data().iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let cols = v.cols();
        let mut out = vec![T::zero(); v.numel()];
        for (src, dst) in v.data().chunks(cols).zip(out.chunks_mut(cols)) {
            kernels::softmax_into(src, temperature, dst);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::SoftmaxRows(x, temperature), rg))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let v = self.value(x);
        let cols = v.cols();
        if cols == 0 {
            return shape_err("layernorm over an empty dimension");
        }
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return shape_err("layernorm gain/bias must match the last dimension");
        }
        let rows = v.rows();
        let mut xhat = vec![T::zero(); v.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for (src, dst) in v.data().chunks(cols).zip(xhat.chunks_mut(cols)) {
            inv_std.push(kernels::normalize_row(src, eps, dst));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<T> = xhat
            .chunks(cols)
            .flat_map(|row| {
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(h, (gv, bv))| *h * *gv + *bv)
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix (embedding lookup when `table` is a leaf).
    /// Scaled dot-product attention with `heads` heads over `[n × d]` inputs.
    ///
    /// Rows are split into consecutive spans of the given lengths; a row only
    /// attends within its own span. `mask`, if given, multiplies the attention
    /// probabilities (one entry per span·head·len² block element, span-major).
    pub fn multi_head_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spans: &[usize],
        heads: usize,
        mask: Option<Vec<T>>,
    ) -> Result<NodeId> {
        let (n, d) = dims2(self.value(q));
        if dims2(self.value(k)) != (n, d) || dims2(self.value(v)) != (n, d) {
            return shape_err("attention inputs must share one [n × d] shape");
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("{} heads do not divide width {}", heads, d));
        }
        if spans.iter().sum::<usize>() != n || spans.contains(&0) {
            return shape_err(format!("spans {:?} do not tile {} rows", spans, n));
        }
        let blocks: usize = spans.iter().map(|l| heads * l * l).sum();
        if let Some(m) = &mask {
            if m.len() != blocks {
                return shape_err(format!("attention mask of {} for {} weights", m.len(), blocks));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); blocks];
        let mut out = vec![T::zero(); n * d];
        let mut scores = Vec::new();
        let (mut start, mut off) = (0, 0);
        for &len in spans {
            for h in 0..heads {
                let c = h * dh;
                let p = &mut probs[off..off + len * len];
                for t in 0..len {
                    let qr = &qv[(start + t) * d + c..(start + t) * d + c + dh];
                    scores.clear();
                    for s in 0..len {
                        let kr = &kv[(start + s) * d + c..(start + s) * d + c + dh];
                        scores.push(crate::scalar::dot(qr, kr) * scale);
                    }
                    if scores.iter().any(|e| !e.is_finite()) {
                        return Err(Error::Numeric("attention scores are not finite".into()));
                    }
                    kernels::softmax_into(&scores, T::one(), &mut p[t * len..(t + 1) * len]);
                }
                let w: Vec<T> = match &mask {
                    Some(m) => p.iter().zip(&m[off..off + len * len]).map(|(a, b)| *a * *b).collect(),
                    None => p.to_vec(),
                };
                for t in 0..len {
                    let o = &mut out[(start + t) * d + c..(start + t) * d + c + dh];
                    for s in 0..len {
                        let ws = w[t * len + s];
                        let vr = &vv[(start + s) * d + c..(start + s) * d + c + dh];
                        for (ov, x) in o.iter_mut().zip(vr) {
                            *ov += ws * *x;
                        }
                    }
                }
                off += len * len;
            }
            start += len;
        }
        let rg = self.needs(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            spans: spans.to_vec(),
            heads,
            scale,
            probs,
            mask,
        };
        Ok(self.push(Tensor::new(vec![n, d], out)?, op, rg))
    }

    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        let n_rows = v.rows();
        let cols = v.cols();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n_rows {
                return shape_err(format!("gather row {} of {}", r, n_rows));
            }
            out.extend_from_slice(v.row(r));
        }
        let t = Tensor::new(vec![rows.len(), cols], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(t, Op::Gather(table, rows.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, cols) = dims2(v);
        if start + len > cols {
            return shape_err(format!("column slice {}..{} of {}", start, start + len, cols));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return shape_err("concat_cols row mismatch");
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = self.needs(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks vectors or matrices with equal width into one matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return shape_err("stack_rows width mismatch");
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols.max(1);
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = self.needs(parts);
        Ok(self.push(t, Op::StackRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = (*self.value(x)).clone().reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let g = self.gather(x, &[i])?;
        let cols = self.value(x).cols();
        self.reshape(g, vec![cols])
    }

    /// Column-wise mean over rows: `[r×c] -> [c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, cols) = dims2(v);
        if rows == 0 {
            return shape_err("mean over zero rows");
        }
        let acc = kernels::mean_rows(v.data(), rows, cols);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::vector(acc), Op::MeanRows(x), rg))
    }

    /// Reduces consecutive groups of `group` rows column-wise: `[g·group × c] -> [g × c]`.
    ///
    /// `Max` keeps the lowest row index among ties and routes the gradient
    /// through that row only.
    pub fn group_reduce_rows(&mut self, x: NodeId, group: usize, mode: Reduce) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, cols) = dims2(v);
        if group == 0 || rows % group != 0 {
            return shape_err(format!("{} rows do not split into groups of {}", rows, group));
        }
        let groups = rows / group;
        let mut out = vec![T::zero(); groups * cols];
        let mut argmax = Vec::new();
        let d = v.data();
        match mode {
            Reduce::Max => {
                argmax = vec![0; groups * cols];
                for g in 0..groups {
                    for c in 0..cols {
                        let mut best = g * group;
                        for r in g * group + 1..(g + 1) * group {
                            if d[r * cols + c] > d[best * cols + c] {
                                best = r;
                            }
                        }
                        out[g * cols + c] = d[best * cols + c];
                        argmax[g * cols + c] = best;
                    }
                }
            }
            Reduce::Mean => {
                let n = T::from_usize(group).unwrap();
                for g in 0..groups {
                    for c in 0..cols {
                        let mut acc = T::zero();
                        for r in g * group..(g + 1) * group {
                            acc += d[r * cols + c];
                        }
                        out[g * cols + c] = acc / n;
                    }
                }
            }
        }
        let t = Tensor::new(vec![groups, cols], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            t,
            Op::GroupReduce {
                x,
                group,
                mode,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return shape_err("mean of empty tensor");
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (rows, cols) = dims2(v);
        if targets.len() != rows || rows == 0 {
            return shape_err(format!("{} targets for {} rows", targets.len(), rows));
        }
        if v.data().iter().any(|e| !e.is_finite()) {
            return Err(Error::Numeric("cross-entropy logits are not finite".into()));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return shape_err(format!("target {} out of {} classes", t, cols));
            }
            let row = v.row(r);
            total += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_into(row, T::one(), &mut probs[r * cols..(r + 1) * cols]);
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[T]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.numel() != labels.len() || labels.is_empty() {
            return shape_err("one label per logit required");
        }
        let mut total = T::zero();
        for (x, y) in v.data().iter().zip(labels) {
            // max(x, 0) - x*y + ln(1 + e^{-|x|})
            total += x.max(T::zero()) - *x * *y + (-x.abs()).exp().ln_1p();
        }
        let loss = total / T::from_usize(labels.len()).unwrap();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.apply_rule(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn apply_rule(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = dims2(av);
                let n = bv.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_bt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = dims2(av);
                let n = bv.rows();
                if let Some(ga) = slot(nodes, grads, *a) {
                    matmul_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    matmul_at_acc(g, av.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(s) = slot(nodes, grads, *id) {
                        acc_into(s, g);
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    acc_into(s, g);
                }
                if let Some(s) = slot(nodes, grads, *r) {
                    let cols = s.len();
                    for chunk in g.chunks(cols) {
                        acc_into(s, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(bv) {
                        *o += *gv * *y;
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for ((o, gv), x) in s.iter_mut().zip(g).zip(av) {
                        *o += *gv * *x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    for (o, gv) in s.iter_mut().zip(g) {
                        *o += *gv * *f;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((o, gv), m) in s.iter_mut().zip(g).zip(mask) {
                        *o += *gv * *m;
                    }
                }
            }
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(x) {
                        *o += *gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            Op::SoftmaxRows(a, temp) => {
                let y = node.value.data();
                let cols = node.value.cols();
                if let Some(s) = slot(nodes, grads, *a) {
                    for ((srow, grow), yrow) in
                        s.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let inner: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for ((o, gv), yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *o += *yv * (*gv - inner) / *temp;
                        }
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
                let cols = node.value.cols();
                let gv = nodes[gain.0].value.data();
                if let Some(s) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, a), h) in s.iter_mut().zip(grow).zip(hrow) {
                            *o += *a * *h;
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *bias) {
                    for grow in g.chunks(cols) {
                        acc_into(s, grow);
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    let n = T::from_usize(cols).unwrap();
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, ((srow, grow), hrow)) in s
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        for ((d, a), gn) in dxhat.iter_mut().zip(grow).zip(gv) {
                            *d = *a * *gn;
                        }
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dh: T = dxhat.iter().zip(hrow).map(|(a, b)| *a * *b).sum();
                        let k = inv_std[r] / n;
                        for ((o, d), h) in srow.iter_mut().zip(&dxhat).zip(hrow) {
                            *o += k * (n * *d - sum_d - *h * sum_dh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                scale,
                probs,
                mask,
            } => {
                let d = node.value.cols();
                let dh = d / heads;
                let (qv, kv, vv) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let n_rows = node.value.rows();
                let mut gq = vec![T::zero(); n_rows * d];
                let mut gk = vec![T::zero(); n_rows * d];
                let mut gv = vec![T::zero(); n_rows * d];
                let (mut start, mut off) = (0, 0);
                let mut dz = Vec::new();
                for &len in spans {
                    for h in 0..*heads {
                        let c = h * dh;
                        let p = &probs[off..off + len * len];
                        let m = mask.as_ref().map(|m| &m[off..off + len * len]);
                        for t in 0..len {
                            let gr = &g[(start + t) * d + c..(start + t) * d + c + dh];
                            // dL/dw[t,s] = g_t · v_s, then through the mask and softmax.
                            dz.clear();
                            for s in 0..len {
                                let vr = &vv[(start + s) * d + c..(start + s) * d + c + dh];
                                let mut dw = crate::scalar::dot(gr, vr);
                                let mut w = p[t * len + s];
                                if let Some(m) = m {
                                    dw *= m[t * len + s];
                                    w *= m[t * len + s];
                                }
                                let gvr = &mut gv[(start + s) * d + c..(start + s) * d + c + dh];
                                for (o, x) in gvr.iter_mut().zip(gr) {
                                    *o += w * *x;
                                }
                                dz.push(dw);
                            }
                            let prow = &p[t * len..(t + 1) * len];
                            let inner: T = dz.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                            for (z, pv) in dz.iter_mut().zip(prow) {
                                *z = *pv * (*z - inner) * *scale;
                            }
                            let qr = &qv[(start + t) * d + c..(start + t) * d + c + dh];
                            for s in 0..len {
                                let z = dz[s];
                                let kr = &kv[(start + s) * d + c..(start + s) * d + c + dh];
                                let gqr = &mut gq[(start + t) * d + c..(start + t) * d + c + dh];
                                for (o, x) in gqr.iter_mut().zip(kr) {
                                    *o += z * *x;
                                }
                                let gkr = &mut gk[(start + s) * d + c..(start + s) * d + c + dh];
                                for (o, x) in gkr.iter_mut().zip(qr) {
                                    *o += z * *x;
                                }
                            }
                        }
                        off += len * len;
                    }
                    start += len;
                }
                for (id, part) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(s) = slot(nodes, grads, id) {
                        acc_into(s, &part);
                    }
                }
            }
            Op::Gather(t, rows) => {
                let cols = node.value.cols();
                if let Some(s) = slot(nodes, grads, *t) {
                    for (k, &r) in rows.iter().enumerate() {
                        acc_into(&mut s[r * cols..(r + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let len = node.value.cols();
                let cols = nodes[x.0].value.cols();
                if let Some(s) = slot(nodes, grads, *x) {
                    for (srow, grow) in s.chunks_mut(cols).zip(g.chunks(len)) {
                        acc_into(&mut srow[*start..*start + len], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(s) = slot(nodes, grads, *p) {
                        for (srow, grow) in s.chunks_mut(w).zip(g.chunks(total)) {
                            acc_into(srow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(s) = slot(nodes, grads, *p) {
                        acc_into(s, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    acc_into(s, g);
                }
            }
            Op::MeanRows(x) => {
                let cols = node.value.numel();
                let rows = nodes[x.0].value.rows();
                let n = T::from_usize(rows).unwrap();
                if let Some(s) = slot(nodes, grads, *x) {
                    for srow in s.chunks_mut(cols) {
                        for (o, gv) in srow.iter_mut().zip(g) {
                            *o += *gv / n;
                        }
                    }
                }
            }
            Op::GroupReduce {
                x,
                group,
                mode,
                argmax,
            } => {
                let cols = node.value.cols();
                let groups = node.value.rows();
                if let Some(s) = slot(nodes, grads, *x) {
                    match mode {
                        Reduce::Max => {
                            for (k, &r) in argmax.iter().enumerate() {
                                s[r * cols + k % cols] += g[k];
                            }
                        }
                        Reduce::Mean => {
                            let n = T::from_usize(*group).unwrap();
                            for gi in 0..groups {
                                for r in gi * group..(gi + 1) * group {
                                    for c in 0..cols {
                                        s[r * cols + c] += g[gi * cols + c] / n;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    for o in s.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    let n = T::from_usize(s.len()).unwrap();
                    for o in s.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = nodes[logits.0].value.cols();
                let n = T::from_usize(targets.len()).unwrap();
                if let Some(s) = slot(nodes, grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            s[r * cols + c] += g[0] * (probs[r * cols + c] - onehot) / n;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let x = nodes[logits.0].value.data();
                let n = T::from_usize(labels.len()).unwrap();
                if let Some(s) = slot(nodes, grads, *logits) {
                    for ((o, xv), y) in s.iter_mut().zip(x).zip(labels) {
                        *o += g[0] * (kernels::sigmoid(*xv) - *y) / n;
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: NodeId,
) -> Option<&'a mut Vec<T>> {
    let n = &nodes[id.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.numel();
    Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn acc_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}
