use serde::{Deserialize, Serialize};

use super::{reduced_width, ss_2d_node, SelectorParams};
use crate::error::{contract, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::spectral::FrequencyPlan;

/// Added parameters of a selector and their share of a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub count: usize,
    pub ratio: f64,
}

/// `count = D·(D/r) + N·(D/r)·D`, `ratio = count / backbone_params`.
pub fn parameter_audit(d: usize, r: usize, n: usize, backbone_params: usize) -> Result<ParamAudit> {
    let hidden = reduced_width(d, r)?;
    if backbone_params == 0 {
        return contract("backbone parameter count must be positive");
    }
    let count = d * hidden + n * hidden * d;
    Ok(ParamAudit {
        count,
        ratio: count as f64 / backbone_params as f64,
    })
}

/// How the blocks are fused while measuring gradient flow.
#[derive(Debug, Clone, Copy)]
pub enum FlowFusion<'a> {
    /// Plain mean of the blocks.
    Average,
    /// 2-D spatial selection.
    Spatial {
        params: &'a SelectorParams,
        plan: &'a FrequencyPlan,
    },
}

/// Gradient of `sum(v)` reaching one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFlow {
    /// Mean over features of `∂v[l][d]/∂u[n][l][d]` with the selection weights held fixed.
    pub direct_weight: f64,
    /// L2 norm of the full gradient, including the path through the gates.
    pub grad_norm: f64,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

pub fn gradient_flow_diagnostic(blocks: &[Tensor], fusion: FlowFusion<'_>) -> Result<Vec<BlockFlow>> {
    if blocks.is_empty() {
        return contract("gradient flow needs at least one block");
    }
    super::stack_blocks(blocks)?;
    let n = blocks.len();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = blocks.iter().map(|b| g.leaf(b.clone(), true)).collect();
    let (v, direct): (NodeId, Vec<f64>) = match fusion {
        FlowFusion::Average => {
            let mut acc = ids[0];
            for &id in &ids[1..] {
                acc = g.add(acc, id)?;
            }
            (g.scale(acc, 1.0 / n as f64), vec![1.0 / n as f64; n])
        }
        FlowFusion::Spatial { params, plan } => {
            let nodes = params.bind(&mut g);
            let (v, w) = ss_2d_node(&mut g, &ids, &nodes, plan)?;
            let weights = g.value(w);
            let direct = (0..n)
                .map(|k| weights.row(k).iter().sum::<f64>() / weights.cols() as f64)
                .collect();
            (v, direct)
        }
    };
    let loss = g.sum(v);
    let grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(direct)
        .map(|(&id, direct_weight)| {
            let grad = grads.get_or_zeros(id, g.value(id).shape());
            BlockFlow {
                direct_weight,
                grad_norm: grad.norm(),
                grad: Some(grad),
            }
        })
        .collect())
}

/// Sample standard deviation over mean; zero for fewer than two values or a zero mean.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt() / mean.abs()
}
