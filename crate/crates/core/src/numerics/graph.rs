//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is always topologically
//! sorted and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Operand, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through one `exp`; within a few ulps of `f64::tanh` in absolute terms and
/// several times faster, which matters in the feed-forward layers.
#[inline]
fn tanh_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + tanh_exp(GELU_C * (x + 0.044715 * x * x * x))),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = tanh_exp(inner);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Contiguous token range `[start, start + len)` of one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulConst { a: NodeId, c: Tensor },
    AddConst { a: NodeId },
    Scale { a: NodeId, c: f64 },
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    Act { a: NodeId, kind: Activation },
    Softmax { a: NodeId, axis: usize },
    Sum { a: NodeId },
    SumRows { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Embed { table: NodeId, ids: Vec<usize> },
    Attention { q: NodeId, k: NodeId, v: NodeId, segments: Vec<Segment>, heads: usize, probs: Vec<f64> },
    Slice0 { a: NodeId, start: usize },
    Join { inputs: Vec<NodeId> },
    Reshape { a: NodeId },
    NormalizeRows { a: NodeId, norms: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that asked for one.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or zeros shaped like the leaf if it did not influence the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, left: &Tensor, right: &Tensor) -> Error {
    Error::Shape {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node. `trainable` leaves receive gradients from `backward`.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, value, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose { a }, value, &[a]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, value, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, value, &[a, b]))
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        let value = self.value(a).zip_with(&c, |x, y| x * y)?;
        Ok(self.push(Op::MulConst { a, c }, value, &[a]))
    }

    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let value = self.value(a).zip_with(c, |x, y| x + y)?;
        Ok(self.push(Op::AddConst { a }, value, &[a]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale { a, c }, value, &[a])
    }

    fn check_row(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<usize> {
        let (av, rv) = (self.value(a), self.value(row));
        if av.rank() < 2 || rv.len() != av.cols() {
            return Err(shape_err(op, av, rv));
        }
        Ok(av.cols())
    }

    /// `a[r, :] + row` for every leading index `r`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let c = self.check_row("add_row", a, row)?;
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for r in value.data_mut().chunks_exact_mut(c) {
            axpy(r, &rv, 1.0);
        }
        Ok(self.push(Op::AddRow { a, row }, value, &[a, row]))
    }

    /// `a[r, :] ∘ row` for every leading index `r`.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let c = self.check_row("mul_row", a, row)?;
        let rv = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for r in value.data_mut().chunks_exact_mut(c) {
            for (x, w) in r.iter_mut().zip(&rv) {
                *x *= w;
            }
        }
        Ok(self.push(Op::MulRow { a, row }, value, &[a, row]))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let value = self.value(a).map(|x| kind.apply(x));
        self.push(Op::Act { a, kind }, value, &[a])
    }

    /// Softmax along `axis`, with max subtraction per slice.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let x = self.value(a);
        if axis >= x.rank() {
            return contract(format!("softmax axis {axis} invalid for shape {:?}", x.shape()));
        }
        let mut value = x.clone();
        for_each_lane(x.shape(), axis, |idx| softmax_lane(value.data_mut(), &idx));
        Ok(self.push(Op::Softmax { a, axis }, value, &[a]))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum { a }, value, &[a])
    }

    /// Sum over the leading axis: `[R, ...] -> [...]`, flattened to one axis.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let c = x.cols();
        let mut out = vec![0.0; c];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let value = Tensor::new(vec![c], out).expect("non-empty");
        self.push(Op::SumRows { a }, value, &[a])
    }

    /// Row-wise layer normalization of a matrix with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", xv, self.value(gain)));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(xhat.len());
        for r in xhat.chunks_exact(c) {
            out.extend(r.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            value,
            &[x, gain, bias],
        ))
    }

    /// Row lookup `table[ids[t]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return contract("embed needs a 2-D table and at least one id");
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return contract(format!("token id {bad} outside vocabulary of {v}"));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(Op::Embed { table, ids: ids.to_vec() }, value, &[table]))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[T×D]`; each segment attends only within itself.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(shape_err("attention", qv, kv));
        }
        let (t, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return contract(format!("width {d} not divisible by {heads} heads"));
        }
        if segments.iter().any(|s| s.len == 0 || s.start + s.len > t) {
            return contract("attention segment out of range");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::new();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for seg in segments {
            let n = seg.len;
            for h in 0..heads {
                let base = probs.len();
                probs.resize(base + n * n, 0.0);
                let p = &mut probs[base..];
                for i in 0..n {
                    let qi = &qd[(seg.start + i) * d + h * dh..][..dh];
                    for j in 0..n {
                        let kj = &kd[(seg.start + j) * d + h * dh..][..dh];
                        p[i * n + j] = dot(qi, kj) * scale;
                    }
                    softmax_slice(&mut p[i * n..(i + 1) * n]);
                    let oi = &mut out[(seg.start + i) * d + h * dh..][..dh];
                    for j in 0..n {
                        let w = p[i * n + j];
                        let vj = &vd[(seg.start + j) * d + h * dh..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs },
            value,
            &[q, k, v],
        ))
    }

    /// Attention probabilities saved by an attention node, segment-major then head-major,
    /// each an `len × len` row-stochastic block.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Slice `[start, start + len)` along the leading axis.
    pub fn slice0(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let value = self.value(a).slice0(start, len)?;
        Ok(self.push(Op::Slice0 { a, start }, value, &[a]))
    }

    /// Concatenates inputs along the leading axis. Inputs must agree on trailing size;
    /// the result is reshaped to `shape`.
    pub fn join(&mut self, inputs: &[NodeId], shape: &[usize]) -> Result<NodeId> {
        let Some(first) = inputs.first() else {
            return contract("join needs at least one input");
        };
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        for &i in inputs {
            let v = self.value(i);
            if v.cols() != c {
                return Err(shape_err("join", self.value(*first), v));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::Join { inputs: inputs.to_vec() }, value, inputs))
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let Some(first) = inputs.first() else {
            return contract("stack needs at least one input");
        };
        let inner = self.value(*first).shape().to_vec();
        for &i in inputs {
            if self.value(i).shape() != inner.as_slice() {
                return Err(shape_err("stack", self.value(*first), self.value(i)));
            }
        }
        let mut shape = vec![inputs.len()];
        shape.extend_from_slice(&inner);
        self.join(inputs, &shape)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { a }, value, &[a]))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut value = x.clone();
        let c = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return contract(format!("row {r} has zero norm"));
            }
            norms.push(n);
            for v in &mut value.data_mut()[r * c..(r + 1) * c] {
                *v /= n;
            }
        }
        Ok(self.push(Op::NormalizeRows { a, norms }, value, &[a]))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        if x.rank() != 2 || x.rows() != targets.len() {
            return contract("cross_entropy needs [B×C] logits and B targets");
        }
        let c = x.cols();
        if targets.iter().any(|&t| t >= c) {
            return contract("cross_entropy target out of range");
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / targets.len() as f64);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            value,
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every trainable leaf
    /// that the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let (Some(g), Op::Leaf) = (g, &node.op) {
                out.grads.insert(
                    NodeId(idx),
                    Tensor::new(node.value.shape().to_vec(), g)?,
                );
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q, s) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let ga = slot(grads, *a, p * q);
                    gemm(p, s, q, Operand::plain(g, s), Operand::transposed(bv.data(), s), ga, 1.0);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, q * s);
                    gemm(q, p, s, Operand::transposed(av.data(), q), Operand::plain(g, s), gb, 1.0);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let ga = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if self.wants(*id) {
                        axpy(slot(grads, *id, g.len()), g, 1.0);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::MulConst { a, c } => {
                let ga = slot(grads, *a, g.len());
                for ((x, gi), ci) in ga.iter_mut().zip(g).zip(c.data()) {
                    *x += gi * ci;
                }
            }
            Op::AddConst { a } => axpy(slot(grads, *a, g.len()), g, 1.0),
            Op::Scale { a, c } => axpy(slot(grads, *a, g.len()), g, *c),
            Op::AddRow { a, row } => {
                let c = out.cols();
                if self.wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if self.wants(*row) {
                    let gr = slot(grads, *row, c);
                    for gi in g.chunks_exact(c) {
                        axpy(gr, gi, 1.0);
                    }
                }
            }
            Op::MulRow { a, row } => {
                let c = out.cols();
                let (av, rv) = (self.value(*a).data(), self.value(*row).data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (gar, gi) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((x, gv), r) in gar.iter_mut().zip(gi).zip(rv) {
                            *x += gv * r;
                        }
                    }
                }
                if self.wants(*row) {
                    let gr = slot(grads, *row, c);
                    for (gi, ar) in g.chunks_exact(c).zip(av.chunks_exact(c)) {
                        for ((x, gv), a) in gr.iter_mut().zip(gi).zip(ar) {
                            *x += gv * a;
                        }
                    }
                }
            }
            Op::Act { a, kind } => {
                let x = self.value(*a).data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * kind.derivative(x[i], out.data()[i]);
                }
            }
            Op::Softmax { a, axis } => {
                let y = out.data();
                let ga = slot(grads, *a, g.len());
                for_each_lane(out.shape(), *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in &idx {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                for x in slot(grads, *a, n) {
                    *x += g[0];
                }
            }
            Op::SumRows { a } => {
                let av = self.value(*a);
                let c = av.cols();
                let ga = slot(grads, *a, av.len());
                for gar in ga.chunks_exact_mut(c) {
                    axpy(gar, g, 1.0);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, c);
                    for (gi, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((x, gv), xh) in gg.iter_mut().zip(gi).zip(xr) {
                            *x += gv * xh;
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, c);
                    for gi in g.chunks_exact(c) {
                        axpy(gb, gi, 1.0);
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * c;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = (0..c).map(|j| dxhat[j] * xhat[base + j]).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[base + j] += rs * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let gt = slot(grads, *table, tv.len());
                for (t, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * d..(id + 1) * d], &g[t * d..(t + 1) * d], 1.0);
                }
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, segments, *heads, probs, grads);
            }
            Op::Slice0 { a, start } => {
                let c = out.cols();
                let n = self.value(*a).len();
                let ga = slot(grads, *a, n);
                axpy(&mut ga[start * c..start * c + g.len()], g, 1.0);
            }
            Op::Join { inputs } => {
                let mut offset = 0;
                for &i in inputs {
                    let n = self.value(i).len();
                    if self.wants(i) {
                        axpy(slot(grads, i, n), &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::Reshape { a } => axpy(slot(grads, *a, g.len()), g, 1.0),
            Op::NormalizeRows { a, norms } => {
                let c = out.cols();
                let y = out.data();
                let ga = slot(grads, *a, g.len());
                for (r, n) in norms.iter().enumerate() {
                    let row = r * c..(r + 1) * c;
                    let dot: f64 = row.clone().map(|i| y[i] * g[i]).sum();
                    for i in row {
                        ga[i] += (g[i] - y[i] * dot) / n;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                let b = targets.len() as f64;
                let gl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / b;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.shape()[0], qv.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut offset = 0;
        let mut ds = Vec::new();
        for seg in segments {
            let n = seg.len;
            for h in 0..heads {
                let p = &probs[offset..offset + n * n];
                offset += n * n;
                ds.clear();
                ds.resize(n * n, 0.0);
                let col = |row: usize| (seg.start + row) * d + h * dh;
                for i in 0..n {
                    let gi = &g[col(i)..col(i) + dh];
                    for j in 0..n {
                        let vj = &vd[col(j)..col(j) + dh];
                        ds[i * n + j] = dot(gi, vj);
                        let pij = p[i * n + j];
                        for (x, gg) in gv[col(j)..col(j) + dh].iter_mut().zip(gi) {
                            *x += pij * gg;
                        }
                    }
                    let row = &mut ds[i * n..(i + 1) * n];
                    let pr = &p[i * n..(i + 1) * n];
                    let s: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, pij) in row.iter_mut().zip(pr) {
                        *x = pij * (*x - s) * scale;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let w = ds[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            gq[col(i) + c] += w * kd[col(j) + c];
                            gk[col(j) + c] += w * qd[col(i) + c];
                        }
                    }
                }
            }
        }
        for (id, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(id) {
                axpy(slot(grads, id, t * d), &buf, 1.0);
            }
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_slice(x: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

fn softmax_lane(data: &mut [f64], idx: &[usize]) {
    let mut lane: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
    softmax_slice(&mut lane);
    for (&i, v) in idx.iter().zip(lane) {
        data[i] = v;
    }
}

/// Calls `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Vec<usize>)) {
    let strides = super::tensor::strides_of(shape);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * strides[axis] + i;
            f((0..n).map(|k| base + k * strides[axis]).collect());
        }
    }
}
