use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    load_checkpoint, save_checkpoint, tokenize, BoundEncoder, Dropout, Encoder, EncoderConfig,
    TokenSequence,
};
use crate::error::{contract, Error, Result};
use crate::numerics::{rng, Graph, NodeId, Tensor};
use crate::selector::{BoundFusion, Fusion, SelectorConfig};

const ENCODER_STREAM: u64 = 1;
const FUSION_STREAM: u64 = 2;
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Avg,
    /// Row 0, holding a prepended classifier id.
    First,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Avg => "avg",
            Pooling::First => "first",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Pooling::Avg),
            "first" => Ok(Pooling::First),
            other => contract(format!("unknown pooling {other:?} (expected avg or first)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub selector: SelectorConfig,
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.selector.validate(self.encoder.d)?;
        if self.selector.n_blocks > self.encoder.depth {
            return contract(format!(
                "cannot fuse the last {} of {} blocks",
                self.selector.n_blocks, self.encoder.depth
            ));
        }
        Ok(())
    }
}

/// Encoder, fusion head over its last blocks, and pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    encoder: BoundEncoder,
    fusion: BoundFusion,
}

impl BoundModel {
    /// Nodes in [`SentenceModel::tensors`] order.
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.encoder.ids().to_vec();
        ids.extend(self.fusion.ids());
        ids
    }
}

impl SentenceModel {
    /// The encoder and the fusion head draw from separate streams of `seed`, so models
    /// that differ only in fusion start from the same encoder weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(config.encoder, &mut rng::stream(seed, &[ENCODER_STREAM]))?;
        let fusion = Fusion::init(
            config.selector,
            config.encoder.d,
            &mut rng::stream(seed, &[FUSION_STREAM]),
        )?;
        Ok(SentenceModel {
            config,
            encoder,
            fusion,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.fusion.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.fusion.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g),
            fusion: self.fusion.bind(g),
        }
    }

    fn bind_frozen(&self, g: &mut Graph) -> Result<BoundModel> {
        let ids: Vec<NodeId> = self.tensors().into_iter().map(|t| g.constant(t.clone())).collect();
        self.bind_ids(&ids)
    }

    /// Handles over caller-provided nodes laid out in [`SentenceModel::tensors`] order.
    pub fn bind_ids(&self, ids: &[NodeId]) -> Result<BoundModel> {
        let split = self.encoder.tensors().len();
        if ids.len() < split {
            return contract(format!("model expects at least {split} nodes, got {}", ids.len()));
        }
        Ok(BoundModel {
            encoder: BoundEncoder::from_ids(&self.encoder, &ids[..split])?,
            fusion: BoundFusion::from_ids(&self.fusion, &ids[split..])?,
        })
    }

    /// Tokenizes for this model: truncation to `max_len`, plus the classifier id
    /// in front under first-token pooling.
    pub fn prepare(&self, text: &str) -> Result<TokenSequence> {
        let cfg = &self.config.encoder;
        let seq = tokenize(text, cfg.vocab_size)?;
        Ok(match self.config.pooling {
            Pooling::Avg => seq.truncated(cfg.max_len),
            Pooling::First => seq.truncated(cfg.max_len.saturating_sub(1)).with_cls(),
        })
    }

    /// Pooled sentence embeddings of a packed batch as a `[B×D]` node.
    pub fn embed_node(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        seqs: &[&TokenSequence],
        dropout: Dropout,
    ) -> Result<NodeId> {
        let (blocks, segments) = self.encoder.forward_packed(g, &bound.encoder, seqs, dropout)?;
        let n = self.fusion.config.n_blocks;
        let selected = &blocks[blocks.len() - n..];
        let d = self.config.encoder.d;
        let mut pooled = Vec::with_capacity(seqs.len());
        for seg in &segments {
            let parts = selected
                .iter()
                .map(|&b| g.slice0(b, seg.start, seg.len))
                .collect::<Result<Vec<_>>>()?;
            let v = self.fusion.fuse(g, &bound.fusion, &parts)?;
            pooled.push(match self.config.pooling {
                Pooling::Avg => {
                    let s = g.sum_rows(v);
                    g.scale(s, 1.0 / seg.len as f64)
                }
                Pooling::First => {
                    let row = g.slice0(v, 0, 1)?;
                    g.reshape(row, &[d])?
                }
            });
        }
        g.stack(&pooled)
    }

    /// Inference-mode embeddings, one `[D]` tensor per sequence.
    pub fn embed(&self, seqs: &[TokenSequence]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g)?;
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let emb = self.embed_node(&mut g, &bound, &refs, Dropout::Off)?;
            let value = g.value(emb);
            for i in 0..chunk.len() {
                out.push(Tensor::new(vec![value.cols()], value.row(i).to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Tensor>> {
        let seqs = texts.iter().map(|t| self.prepare(t)).collect::<Result<Vec<_>>>()?;
        self.embed(&seqs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.tensors())
    }

    /// Loads parameters saved by [`SentenceModel::save`] into a model of the same config.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut model = SentenceModel::init(config, 0)?;
        let loaded = load_checkpoint(path)?;
        let mut slots = model.tensors_mut();
        if loaded.len() != slots.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                loaded.len(),
                slots.len()
            )));
        }
        for (k, (slot, t)) in slots.iter_mut().zip(loaded).enumerate() {
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {k}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        Ok(model)
    }
}
