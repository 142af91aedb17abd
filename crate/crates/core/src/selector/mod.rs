//! Spatial selection: fuse the hidden states of several encoder blocks with
//! per-feature softmax weights derived from a squeeze-and-excitation gate.

mod diagnostics;
mod fusion;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use diagnostics::{
    coefficient_of_variation, gradient_flow_diagnostic, parameter_audit, BlockFlow, FlowFusion,
    ParamAudit,
};
pub use fusion::{BoundFusion, Fusion, FusionVariant, SelectorConfig};

use crate::error::{contract, Error, Result};
use crate::numerics::{Activation, Graph, NodeId, Tensor};
use crate::spectral::{fs_squeeze_node, FrequencyPlan};

/// Block × token × feature stack of hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStack {
    tensor: Tensor,
}

impl HiddenStack {
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 3 {
            return contract(format!("hidden stack needs rank 3, got {:?}", tensor.shape()));
        }
        Ok(HiddenStack { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// `(N, L, D)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2])
    }

    pub fn block(&self, n: usize) -> Tensor {
        let (_, l, d) = self.dims();
        self.tensor
            .slice0(n, 1)
            .and_then(|t| t.reshape(&[l, d]))
            .expect("block index in range")
    }
}

/// Stacks `[L×D]` block outputs into an `[N×L×D]` tensor, in the given order.
pub fn stack_blocks(blocks: &[Tensor]) -> Result<HiddenStack> {
    let Some(first) = blocks.first() else {
        return contract("stack_blocks needs at least one block");
    };
    if first.rank() != 2 {
        return contract(format!("blocks must be L×D matrices, got {:?}", first.shape()));
    }
    let mut data = Vec::with_capacity(first.len() * blocks.len());
    for b in blocks {
        if b.shape() != first.shape() {
            return Err(Error::Shape {
                op: "stack_blocks",
                left: first.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        data.extend_from_slice(b.data());
    }
    let shape = vec![blocks.len(), first.shape()[0], first.shape()[1]];
    HiddenStack::from_tensor(Tensor::new(shape, data)?)
}

/// Nonlinearity inside the excitation bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bottleneck {
    #[default]
    Relu,
    Tanh,
}

impl Bottleneck {
    pub fn activation(self) -> Activation {
        match self {
            Bottleneck::Relu => Activation::Relu,
            Bottleneck::Tanh => Activation::Tanh,
        }
    }
}

/// Excitation weights: a shared reduction `W1: D×(D/r)` and one expansion
/// `W2[n]: (D/r)×D` per fused branch. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub w1: Tensor,
    pub w2: Vec<Tensor>,
    pub reduction: usize,
    pub bottleneck: Bottleneck,
}

impl SelectorParams {
    /// Uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        reduction: usize,
        branches: usize,
        bottleneck: Bottleneck,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = reduced_width(d, reduction)?;
        if branches == 0 {
            return contract("selector needs at least one branch");
        }
        let w1 = Tensor::uniform(&[d, hidden], 1.0 / (d as f64).sqrt(), rng);
        let w2 = (0..branches)
            .map(|_| Tensor::uniform(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng))
            .collect();
        Ok(SelectorParams {
            w1,
            w2,
            reduction,
            bottleneck,
        })
    }

    /// All-zero weights: every gate is exactly `sigmoid(0) = 0.5`.
    pub fn zeros(d: usize, reduction: usize, branches: usize) -> Result<Self> {
        let hidden = reduced_width(d, reduction)?;
        Ok(SelectorParams {
            w1: Tensor::zeros(&[d, hidden]),
            w2: vec![Tensor::zeros(&[hidden, d]); branches.max(1)],
            reduction,
            bottleneck: Bottleneck::Relu,
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn branches(&self) -> usize {
        self.w2.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.w2.iter().map(Tensor::len).sum::<usize>()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        std::iter::once(&self.w1).chain(&self.w2).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        std::iter::once(&mut self.w1).chain(&mut self.w2).collect()
    }

    /// Registers the weights on `g` as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> SelectorNodes {
        SelectorNodes {
            w1: g.param(self.w1.clone()),
            w2: self.w2.iter().map(|w| g.param(w.clone())).collect(),
            bottleneck: self.bottleneck,
        }
    }
}

fn reduced_width(d: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || d % reduction != 0 || d / reduction == 0 {
        return contract(format!("reduction ratio {reduction} must divide embedding dimension {d}"));
    }
    Ok(d / reduction)
}

/// Graph handles for a bound [`SelectorParams`].
#[derive(Debug, Clone)]
pub struct SelectorNodes {
    pub w1: NodeId,
    pub w2: Vec<NodeId>,
    pub bottleneck: Bottleneck,
}

impl SelectorNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        std::iter::once(self.w1).chain(self.w2.iter().copied()).collect()
    }
}

/// Fused `[L×D]` representation and the `[N×D]` selection weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub v: Tensor,
    pub weights: Tensor,
}

/// Excitation gates `e[n] = sigmoid(act(f·W1)·W2[n])` as `[D]` nodes.
pub fn excite_node(g: &mut Graph, f: NodeId, p: &SelectorNodes) -> Result<Vec<NodeId>> {
    let d = g.value(f).len();
    let row = g.reshape(f, &[1, d])?;
    let reduced = g.matmul(row, p.w1)?;
    let surplus = g.activation(reduced, p.bottleneck.activation());
    p.w2
        .iter()
        .map(|&w2| {
            let z = g.matmul(surplus, w2)?;
            let e = g.activation(z, Activation::Sigmoid);
            g.reshape(e, &[d])
        })
        .collect()
}

pub fn excite(f: &Tensor, p: &SelectorParams) -> Result<Vec<Tensor>> {
    if f.len() != p.dim() {
        return Err(Error::Shape {
            op: "excite",
            left: f.shape().to_vec(),
            right: p.w1.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let fid = g.constant(f.clone().reshape(&[f.len()])?);
    let nodes = p.bind(&mut g);
    let e = excite_node(&mut g, fid, &nodes)?;
    Ok(e.into_iter().map(|id| g.value(id).clone()).collect())
}

/// Softmax over the branch axis of the gates, then the weighted sum of blocks.
/// Returns `(v, weights)` nodes of shape `[L×D]` and `[N×D]`.
pub fn select_fuse_node(
    g: &mut Graph,
    gates: &[NodeId],
    blocks: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    if gates.len() != blocks.len() || gates.is_empty() {
        return contract(format!(
            "{} excitation vectors for {} blocks",
            gates.len(),
            blocks.len()
        ));
    }
    let stacked = g.stack(gates)?;
    let weights = g.softmax(stacked, 0)?;
    let d = g.value(weights).shape()[1];
    let mut acc = None;
    for (n, &block) in blocks.iter().enumerate() {
        let w = g.slice0(weights, n, 1)?;
        let w = g.reshape(w, &[d])?;
        let term = g.mul_row(block, w)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok((acc.expect("at least one block"), weights))
}

pub fn select_fuse(gates: &[Tensor], blocks: &[Tensor]) -> Result<FusedRepresentation> {
    let mut g = Graph::new();
    let e: Vec<NodeId> = gates.iter().map(|t| g.constant(t.clone())).collect();
    let b: Vec<NodeId> = blocks.iter().map(|t| g.constant(t.clone())).collect();
    let (v, w) = select_fuse_node(&mut g, &e, &b)?;
    Ok(FusedRepresentation {
        v: g.value(v).clone(),
        weights: g.value(w).clone(),
    })
}

/// Full 2-D spatial selection: stack → frequency squeeze → excite → select.
pub fn ss_2d_node(
    g: &mut Graph,
    blocks: &[NodeId],
    p: &SelectorNodes,
    plan: &FrequencyPlan,
) -> Result<(NodeId, NodeId)> {
    if blocks.len() != p.w2.len() {
        return contract(format!(
            "selector has {} branches but {} blocks were given",
            p.w2.len(),
            blocks.len()
        ));
    }
    let stack = g.stack(blocks)?;
    let f = fs_squeeze_node(g, stack, plan)?;
    let gates = excite_node(g, f, p)?;
    select_fuse_node(g, &gates, blocks)
}

pub fn ss_forward_2d(
    blocks: &[Tensor],
    p: &SelectorParams,
    plan: &FrequencyPlan,
) -> Result<FusedRepresentation> {
    stack_blocks(blocks)?;
    let mut g = Graph::new();
    let ids: Vec<NodeId> = blocks.iter().map(|t| g.constant(t.clone())).collect();
    let nodes = p.bind(&mut g);
    let (v, w) = ss_2d_node(&mut g, &ids, &nodes, plan)?;
    Ok(FusedRepresentation {
        v: g.value(v).clone(),
        weights: g.value(w).clone(),
    })
}

/// 1-D spatial selection on a single `[L×D]` representation: squeeze over tokens,
/// gate each feature with a sigmoid, rescale.
pub fn ss_1d_node(
    g: &mut Graph,
    block: NodeId,
    p: &SelectorNodes,
    plan: &FrequencyPlan,
) -> Result<NodeId> {
    if p.w2.len() != 1 || plan.n_blocks != 1 {
        return contract("1-D selection needs a single-branch selector and a single-row plan");
    }
    let shape = g.value(block).shape().to_vec();
    if shape.len() != 2 {
        return contract(format!("1-D selection needs an L×D block, got {shape:?}"));
    }
    let stack = g.reshape(block, &[1, shape[0], shape[1]])?;
    let f = fs_squeeze_node(g, stack, plan)?;
    let gate = excite_node(g, f, p)?[0];
    g.mul_row(block, gate)
}

pub fn ss_forward_1d(block: &Tensor, p: &SelectorParams, plan: &FrequencyPlan) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = g.constant(block.clone());
    let nodes = p.bind(&mut g);
    let v = ss_1d_node(&mut g, b, &nodes, plan)?;
    Ok(g.value(v).clone())
}

/// Token-level self-gate: a per-token relevance `sigmoid(x·w + b)` scales the token
/// and the result is added back onto the input.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGateParams {
    /// `[D×1]` projection.
    pub w: Tensor,
    /// `[1]` bias.
    pub b: Tensor,
}

impl TokenGateParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        TokenGateParams {
            w: Tensor::uniform(&[d, 1], 1.0 / (d as f64).sqrt(), rng),
            b: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(d: usize) -> Self {
        TokenGateParams {
            w: Tensor::zeros(&[d, 1]),
            b: Tensor::zeros(&[1]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> (NodeId, NodeId) {
        (g.param(self.w.clone()), g.param(self.b.clone()))
    }
}

pub fn token_gate_node(g: &mut Graph, block: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let shape = g.value(block).shape().to_vec();
    let logits = g.matmul(block, w)?;
    let logits = g.add_row(logits, b)?;
    let relevance = g.activation(logits, Activation::Sigmoid);
    // [L×1] relevance broadcast across features.
    let ones = g.constant(Tensor::ones(&[1, shape[1]]));
    let spread = g.matmul(relevance, ones)?;
    let gated = g.mul(spread, block)?;
    g.add(block, gated)
}

pub fn token_selfgate_baseline(block: &Tensor, gate: &TokenGateParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(block.clone());
    let (w, b) = gate.bind(&mut g);
    let y = token_gate_node(&mut g, x, w, b)?;
    Ok(g.value(y).clone())
}
