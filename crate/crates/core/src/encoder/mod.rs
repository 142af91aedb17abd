//! Small pre-norm transformer encoder over hashed word tokens.
//!
//! Sentences of a batch are packed into one `[T×D]` token matrix so the dense
//! layers run as single matrix products; attention stays within each sentence.

mod checkpoint;

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{rng, Activation, Graph, NodeId, Segment, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Prepended when first-token pooling is used.
pub const CLS_ID: usize = 2;
pub const RESERVED_IDS: usize = 3;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub depth: usize,
    #[serde(rename = "d_model")]
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 8192,
            depth: 6,
            d: 64,
            heads: 4,
            ffn_mult: 4,
            dropout_rate: 0.1,
            max_len: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED_IDS {
            return contract(format!("vocab_size must exceed the {RESERVED_IDS} reserved ids"));
        }
        if self.depth == 0 || self.d == 0 || self.ffn_mult == 0 || self.max_len == 0 {
            return contract("depth, d_model, ffn_mult and max_len must be positive");
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return contract(format!("d_model {} not divisible by {} heads", self.d, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return contract(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return contract("token sequence is empty");
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return contract(format!("token id {bad} outside vocabulary of {vocab_size}"));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_cls(&self) -> TokenSequence {
        let mut ids = Vec::with_capacity(self.ids.len() + 1);
        ids.push(CLS_ID);
        ids.extend_from_slice(&self.ids);
        TokenSequence { ids }
    }

    /// Keeps at most `max_len` leading tokens.
    pub fn truncated(mut self, max_len: usize) -> TokenSequence {
        self.ids.truncate(max_len.max(1));
        self
    }
}

/// Lowercased whitespace tokens hashed with 64-bit FNV-1a into the non-reserved
/// id range. Tokens with no alphanumeric character map to the unknown id.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<TokenSequence> {
    if vocab_size <= RESERVED_IDS {
        return contract(format!("vocab_size must exceed the {RESERVED_IDS} reserved ids"));
    }
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(|raw| {
            let word = raw.to_lowercase();
            if !word.chars().any(char::is_alphanumeric) {
                return UNK_ID;
            }
            let mut h = FnvHasher::default();
            h.write(word.as_bytes());
            RESERVED_IDS + (h.finish() % (vocab_size - RESERVED_IDS) as u64) as usize
        })
        .collect();
    if ids.is_empty() {
        return contract("cannot tokenize empty text");
    }
    Ok(TokenSequence { ids })
}

/// Sinusoidal position table `[len×d]`.
pub fn positions(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, k) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((k / 2 * 2) as f64) / d as f64);
        if k % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl BlockParams {
    fn init<R: Rng + ?Sized>(d: usize, inner: usize, rng: &mut R) -> Self {
        let lin = |fan_in: usize, fan_out: usize, rng: &mut R| {
            Tensor::uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
        };
        BlockParams {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: lin(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: lin(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: lin(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: lin(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w_in: lin(d, inner, rng),
            b_in: Tensor::zeros(&[inner]),
            w_out: lin(inner, d, rng),
            b_out: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w_in,
            &self.b_in, &self.w_out, &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w_in, &mut self.b_in,
            &mut self.w_out, &mut self.b_out,
        ]
    }
}

/// Dropout behaviour of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    /// Masks drawn from streams derived from `(seed, item, block, site)`.
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
}

/// An [`Encoder`] registered on a graph, one node per tensor in [`Encoder::tensors`] order.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    ids: Vec<NodeId>,
}

impl BoundEncoder {
    /// Rebuilds the handles from nodes laid out in [`Encoder::tensors`] order.
    pub fn from_ids(encoder: &Encoder, ids: &[NodeId]) -> Result<Self> {
        if ids.len() != 1 + 16 * encoder.blocks.len() {
            return contract(format!("encoder expects {} nodes, got {}", 1 + 16 * encoder.blocks.len(), ids.len()));
        }
        Ok(BoundEncoder { ids: ids.to_vec() })
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embedding = Tensor::uniform(&[config.vocab_size, d], 3f64.sqrt(), rng);
        let blocks = (0..config.depth)
            .map(|_| BlockParams::init(d, d * config.ffn_mult, rng))
            .collect();
        Ok(Encoder {
            config,
            embedding,
            blocks,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        BoundEncoder {
            ids: self.tensors().into_iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Runs the packed batch through every block. Returns the `[T×D]` output of each
    /// block in depth order and the segment of each sequence.
    pub fn forward_packed(
        &self,
        g: &mut Graph,
        bound: &BoundEncoder,
        seqs: &[&TokenSequence],
        dropout: Dropout,
    ) -> Result<(Vec<NodeId>, Vec<Segment>)> {
        if seqs.is_empty() {
            return contract("cannot encode an empty batch");
        }
        let cfg = &self.config;
        let mut segments = Vec::with_capacity(seqs.len());
        let mut tokens = Vec::new();
        for s in seqs {
            if s.len() > cfg.max_len {
                return contract(format!("sequence of {} tokens exceeds max_len {}", s.len(), cfg.max_len));
            }
            if let Some(bad) = s.ids().iter().find(|&&i| i >= cfg.vocab_size) {
                return contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
            }
            segments.push(Segment { start: tokens.len(), len: s.len() });
            tokens.extend_from_slice(s.ids());
        }
        let d = cfg.d;
        let table = positions(cfg.max_len, d);
        let mut pos = Vec::with_capacity(tokens.len() * d);
        for seg in &segments {
            pos.extend_from_slice(&table.data()[..seg.len * d]);
        }
        let pos = Tensor::new(vec![tokens.len(), d], pos)?;

        let p = &bound.ids;
        let emb = g.embed(p[0], &tokens)?;
        let mut x = g.add_const(emb, &pos)?;
        x = self.dropout(g, x, &segments, dropout, &[u64::MAX, 0])?;
        let mut outputs = Vec::with_capacity(cfg.depth);
        for (n, w) in p[1..].chunks(16).enumerate() {
            let n = n as u64;
            let h = g.layer_norm(x, w[0], w[1], LN_EPS)?;
            let q = linear(g, h, w[2], w[3])?;
            let k = linear(g, h, w[4], w[5])?;
            let v = linear(g, h, w[6], w[7])?;
            let a = g.attention(q, k, v, &segments, cfg.heads)?;
            let a = linear(g, a, w[8], w[9])?;
            let a = self.dropout(g, a, &segments, dropout, &[n, 1])?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, w[10], w[11], LN_EPS)?;
            let f = linear(g, h, w[12], w[13])?;
            let f = g.activation(f, Activation::Gelu);
            let f = linear(g, f, w[14], w[15])?;
            let f = self.dropout(g, f, &segments, dropout, &[n, 2])?;
            x = g.add(x, f)?;
            outputs.push(x);
        }
        Ok((outputs, segments))
    }

    fn dropout(
        &self,
        g: &mut Graph,
        x: NodeId,
        segments: &[Segment],
        mode: Dropout,
        site: &[u64],
    ) -> Result<NodeId> {
        let rate = self.config.dropout_rate;
        let Dropout::Seeded(seed) = mode else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let d = self.config.d;
        let keep = 1.0 / (1.0 - rate);
        let mut mask = Vec::with_capacity(g.value(x).len());
        for (item, seg) in segments.iter().enumerate() {
            let mut r = rng::stream(seed, &[item as u64, site[0], site[1]]);
            mask.extend((0..seg.len * d).map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep }));
        }
        g.mul_const(x, Tensor::new(g.value(x).shape().to_vec(), mask)?)
    }

    /// Every block's `[L×D]` output for a single sequence.
    pub fn encode(&self, seq: &TokenSequence, dropout: Dropout) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let (outs, _) = self.forward_packed(&mut g, &bound, &[seq], dropout)?;
        Ok(outs.into_iter().map(|id| g.value(id).clone()).collect())
    }

    /// Binds the parameters as constants for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundEncoder {
        BoundEncoder {
            ids: self.tensors().into_iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Mean of the first `true_len` rows.
pub fn pool_avg(v: &Tensor, true_len: usize) -> Result<Tensor> {
    if v.rank() != 2 {
        return contract(format!("pooling needs an L×D matrix, got {:?}", v.shape()));
    }
    if true_len == 0 || true_len > v.shape()[0] {
        return contract(format!("true_len {true_len} outside 1..={}", v.shape()[0]));
    }
    let d = v.shape()[1];
    let mut out = vec![0.0; d];
    for t in 0..true_len {
        for (o, x) in out.iter_mut().zip(v.row(t)) {
            *o += x;
        }
    }
    Tensor::new(vec![d], out.into_iter().map(|x| x / true_len as f64).collect())
}

pub fn pool_first(v: &Tensor) -> Result<Tensor> {
    if v.rank() != 2 {
        return contract(format!("pooling needs an L×D matrix, got {:?}", v.shape()));
    }
    Tensor::new(vec![v.shape()[1]], v.row(0).to_vec())
}
