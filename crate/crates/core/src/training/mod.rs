//! Unsupervised contrastive training with dropout positives and in-batch negatives.

mod model;

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dropout, TokenSequence};
use crate::error::{contract, Result};
use crate::numerics::{rng, Graph, NodeId, Tensor};

pub use model::{BoundModel, ModelConfig, Pooling, SentenceModel};

const BATCH_STREAM: u64 = 0xba7c;
const DROPOUT_STREAM: u64 = 0xd409;

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return contract(format!("cosine of vectors of length {} and {}", a.len(), b.len()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return contract("cosine similarity of a zero vector");
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Anchor embeddings and their positives, row `i` of each forming a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    anchors: Vec<Tensor>,
    positives: Vec<Tensor>,
}

impl ContrastiveBatch {
    pub fn new(anchors: Vec<Tensor>, positives: Vec<Tensor>) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != positives.len() {
            return contract(format!(
                "{} anchors for {} positives",
                anchors.len(),
                positives.len()
            ));
        }
        let d = anchors[0].len();
        if anchors.iter().chain(&positives).any(|t| t.len() != d || !t.is_finite()) {
            return contract("batch embeddings must be finite and share one width");
        }
        Ok(ContrastiveBatch { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Tensor] {
        &self.anchors
    }

    pub fn positives(&self) -> &[Tensor] {
        &self.positives
    }
}

/// Mean over anchors of `−log softmax_k(sim(aᵢ, p_k)/τ)[i]`.
pub fn info_nce_loss(batch: &ContrastiveBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let b = batch.len();
    let mut total = 0.0;
    for (i, a) in batch.anchors.iter().enumerate() {
        let logits = batch
            .positives
            .iter()
            .map(|p| Ok(cosine_similarity(a, p)? / tau))
            .collect::<Result<Vec<f64>>>()?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / b as f64)
}

/// Graph form of [`info_nce_loss`] on `[B×D]` anchor and positive nodes.
pub fn info_nce_node(g: &mut Graph, anchors: NodeId, positives: NodeId, tau: f64) -> Result<NodeId> {
    check_tau(tau)?;
    let (sa, sp) = (g.value(anchors).shape().to_vec(), g.value(positives).shape().to_vec());
    if sa.len() != 2 || sa != sp {
        return contract(format!("InfoNCE needs matching B×D inputs, got {sa:?} and {sp:?}"));
    }
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    let pt = g.transpose(p)?;
    let sims = g.matmul(a, pt)?;
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<usize> = (0..sa[0]).collect();
    g.cross_entropy(logits, &targets)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return contract(format!("temperature must be positive, got {tau}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            temperature: 0.05,
            steps: 1000,
            eval_every: 125,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.temperature)?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return contract(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return contract("batch_size must be positive");
        }
        Ok(())
    }
}

/// Indices of the sentences drawn for `step`, without replacement.
pub fn sample_batch(n_sentences: usize, cfg: &TrainConfig, step: usize) -> Vec<usize> {
    let mut r = rng::stream(cfg.seed, &[BATCH_STREAM, step as u64]);
    index::sample(&mut r, n_sentences, cfg.batch_size.min(n_sentences)).into_vec()
}

/// Contrastive loss node for one batch: each sentence is encoded twice in one packed
/// pass; the two copies get different dropout masks through their batch positions.
pub fn contrastive_loss_node(
    model: &SentenceModel,
    g: &mut Graph,
    bound: &BoundModel,
    batch: &[&TokenSequence],
    dropout_seed: u64,
    tau: f64,
) -> Result<NodeId> {
    let b = batch.len();
    let doubled: Vec<&TokenSequence> = batch.iter().chain(batch.iter()).copied().collect();
    let emb = model.embed_node(g, bound, &doubled, Dropout::Seeded(dropout_seed))?;
    let anchors = g.slice0(emb, 0, b)?;
    let positives = g.slice0(emb, b, b)?;
    info_nce_node(g, anchors, positives, tau)
}

/// One SGD step. Returns the loss before the update.
pub fn train_step(
    model: &mut SentenceModel,
    batch: &[&TokenSequence],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return contract("training batch is empty");
    }
    cfg.validate()?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let seed = rng::derive_seed(cfg.seed, &[DROPOUT_STREAM, step as u64]);
    let loss = contrastive_loss_node(model, &mut g, &bound, batch, seed, cfg.temperature)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return contract(format!("non-finite loss {value} at step {step}"));
    }
    let grads = g.backward(loss)?;
    let ids = bound.ids();
    for (param, id) in model.tensors_mut().into_iter().zip(ids) {
        if let Some(grad) = grads.get(id) {
            for (w, dw) in param.data_mut().iter_mut().zip(grad.data()) {
                *w -= cfg.learning_rate * dw;
            }
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub dev_spearman: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
}

/// Runs `cfg.steps` SGD steps over `sentences`, calling `dev` every `eval_every`
/// steps (and after the last step). Log lines are `step<TAB>loss<TAB>dev`.
pub fn train(
    model: &mut SentenceModel,
    sentences: &[TokenSequence],
    cfg: &TrainConfig,
    dev: &mut dyn FnMut(&SentenceModel) -> Result<f64>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if sentences.is_empty() {
        return contract("no training sentences");
    }
    let mut history = TrainHistory::default();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step\tloss\tdev_spearman")?;
    }
    let mut since = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&TokenSequence> = sample_batch(sentences.len(), cfg, step)
            .into_iter()
            .map(|i| &sentences[i])
            .collect();
        history.losses.push(train_step(model, &batch, cfg, step)?);
        let done = step + 1;
        let due = cfg.eval_every > 0 && done % cfg.eval_every == 0;
        if due || done == cfg.steps {
            let window = &history.losses[since..];
            let entry = LogEntry {
                step: done,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                dev_spearman: dev(model)?,
            };
            since = done;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}\t{:.6}\t{:.6}", entry.step, entry.loss, entry.dev_spearman)?;
            }
            history.log.push(entry);
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
