use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ss_1d_node, ss_2d_node, token_gate_node, Bottleneck, SelectorNodes, SelectorParams,
    TokenGateParams,
};
use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::spectral::{select_low_frequencies_clamped, FrequencyPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionVariant {
    /// Mean of the last `k` blocks (`k = 1` is the plain last-block baseline).
    #[serde(rename = "avg")]
    Avg,
    /// Mean of the last `k` blocks followed by 1-D selection.
    #[serde(rename = "1d")]
    OneD,
    /// Stacked 2-D spatial selection over the last `k` blocks.
    #[serde(rename = "2d")]
    TwoD,
    /// Mean of the last `k` blocks followed by the token-level self-gate.
    #[serde(rename = "token_gate")]
    TokenGate,
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Avg => "avg",
            FusionVariant::OneD => "1d",
            FusionVariant::TwoD => "2d",
            FusionVariant::TokenGate => "token_gate",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(FusionVariant::Avg),
            "1d" => Ok(FusionVariant::OneD),
            "2d" => Ok(FusionVariant::TwoD),
            "token_gate" => Ok(FusionVariant::TokenGate),
            other => contract(format!(
                "unknown variant {other:?} (expected avg, 1d, 2d or token_gate)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub variant: FusionVariant,
    /// Number of final encoder blocks fused.
    pub n_blocks: usize,
    /// Frequency parts.
    pub m: usize,
    /// Reduction ratio.
    pub r: usize,
    pub bottleneck: Bottleneck,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            variant: FusionVariant::TwoD,
            n_blocks: 3,
            m: 4,
            r: 16,
            bottleneck: Bottleneck::Relu,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.n_blocks == 0 {
            return contract("n_blocks must be at least 1");
        }
        if matches!(self.variant, FusionVariant::OneD | FusionVariant::TwoD) {
            if self.m == 0 || d % self.m != 0 {
                return contract(format!("m = {} must divide embedding dimension {d}", self.m));
            }
            super::reduced_width(d, self.r)?;
        }
        Ok(())
    }
}

/// Trainable fusion head applied on top of the encoder's block outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub config: SelectorConfig,
    pub selector: Option<SelectorParams>,
    pub gate: Option<TokenGateParams>,
}

/// A [`Fusion`] registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundFusion {
    selector: Option<SelectorNodes>,
    gate: Option<(NodeId, NodeId)>,
}

impl BoundFusion {
    /// Rebuilds the handles from nodes laid out in [`Fusion::tensors`] order.
    pub fn from_ids(fusion: &Fusion, ids: &[NodeId]) -> Result<Self> {
        if ids.len() != fusion.tensors().len() {
            return contract(format!(
                "fusion has {} tensors, got {} nodes",
                fusion.tensors().len(),
                ids.len()
            ));
        }
        let split = fusion.selector.as_ref().map_or(0, |s| 1 + s.branches());
        Ok(BoundFusion {
            selector: fusion.selector.as_ref().map(|s| SelectorNodes {
                w1: ids[0],
                w2: ids[1..split].to_vec(),
                bottleneck: s.bottleneck,
            }),
            gate: fusion.gate.as_ref().map(|_| (ids[split], ids[split + 1])),
        })
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.selector.as_ref().map(SelectorNodes::ids).unwrap_or_default();
        if let Some((w, b)) = self.gate {
            ids.extend([w, b]);
        }
        ids
    }
}

impl Fusion {
    pub fn init<R: Rng + ?Sized>(config: SelectorConfig, d: usize, rng: &mut R) -> Result<Self> {
        config.validate(d)?;
        let branches = match config.variant {
            FusionVariant::TwoD => config.n_blocks,
            _ => 1,
        };
        let selector = match config.variant {
            FusionVariant::OneD | FusionVariant::TwoD => Some(SelectorParams::init(
                d,
                config.r,
                branches,
                config.bottleneck,
                rng,
            )?),
            _ => None,
        };
        let gate = (config.variant == FusionVariant::TokenGate).then(|| TokenGateParams::init(d, rng));
        Ok(Fusion {
            config,
            selector,
            gate,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.selector.as_ref().map(SelectorParams::tensors).unwrap_or_default();
        if let Some(g) = &self.gate {
            out.extend([&g.w, &g.b]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self
            .selector
            .as_mut()
            .map(SelectorParams::tensors_mut)
            .unwrap_or_default();
        if let Some(g) = &mut self.gate {
            out.extend([&mut g.w, &mut g.b]);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundFusion {
        BoundFusion {
            selector: self.selector.as_ref().map(|s| s.bind(g)),
            gate: self.gate.as_ref().map(|p| p.bind(g)),
        }
    }

    /// Frequency plan for a sentence of `seq_len` tokens, clamped when the grid is
    /// smaller than `m`.
    pub fn plan_for(&self, seq_len: usize) -> Result<FrequencyPlan> {
        let rows = match self.config.variant {
            FusionVariant::TwoD => self.config.n_blocks,
            _ => 1,
        };
        select_low_frequencies_clamped(rows, seq_len, self.config.m)
    }

    /// Fuses the selected `[L×D]` block nodes of one sentence (depth order) into one.
    pub fn fuse(&self, g: &mut Graph, bound: &BoundFusion, blocks: &[NodeId]) -> Result<NodeId> {
        if blocks.len() != self.config.n_blocks {
            return contract(format!(
                "fusion configured for {} blocks, got {}",
                self.config.n_blocks,
                blocks.len()
            ));
        }
        let seq_len = g.value(blocks[0]).shape()[0];
        match self.config.variant {
            FusionVariant::Avg => average(g, blocks),
            FusionVariant::OneD => {
                let mean = average(g, blocks)?;
                let nodes = bound.selector.as_ref().expect("1d fusion has a selector");
                ss_1d_node(g, mean, nodes, &self.plan_for(seq_len)?)
            }
            FusionVariant::TwoD => {
                let nodes = bound.selector.as_ref().expect("2d fusion has a selector");
                Ok(ss_2d_node(g, blocks, nodes, &self.plan_for(seq_len)?)?.0)
            }
            FusionVariant::TokenGate => {
                let mean = average(g, blocks)?;
                let (w, b) = bound.gate.expect("token gate fusion has gate weights");
                token_gate_node(g, mean, w, b)
            }
        }
    }
}

fn average(g: &mut Graph, blocks: &[NodeId]) -> Result<NodeId> {
    if blocks.len() == 1 {
        return Ok(blocks[0]);
    }
    let mut acc = blocks[0];
    for &b in &blocks[1..] {
        acc = g.add(acc, b)?;
    }
    Ok(g.scale(acc, 1.0 / blocks.len() as f64))
}
