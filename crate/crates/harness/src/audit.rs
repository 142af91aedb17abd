//! Latency, similarity-density and gradient-flow measurements on trained models.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use s2sent_core::encoder::{Dropout, TokenSequence};
use s2sent_core::selector::{
    coefficient_of_variation, gradient_flow_diagnostic, FlowFusion, FusionVariant,
};
use s2sent_core::training::SentenceModel;
use s2sent_core::{Error, Result};

use crate::data::SentencePairRecord;
use crate::metrics::pair_similarities;

pub const MIN_LATENCY_REPS: usize = 30;
const WARMUP_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub baseline_ns_per_sentence: f64,
    pub selector_ns_per_sentence: f64,
    /// `selector / baseline`.
    pub ratio: f64,
    pub repetitions: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_per_sentence(model: &SentenceModel, seqs: &[TokenSequence], reps: usize) -> Result<f64> {
    for _ in 0..WARMUP_ROUNDS {
        model.embed(seqs)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(model.embed(seqs)?);
        samples.push(t.elapsed().as_nanos() as f64 / seqs.len() as f64);
    }
    Ok(median(samples))
}

/// Median inference time per sentence for a last-block baseline and a model with a
/// fusion head, with rounds of the two interleaved so drift affects both alike.
pub fn latency_bench(
    baseline: &SentenceModel,
    selector: &SentenceModel,
    sentences: &[&str],
    repetitions: usize,
) -> Result<LatencyReport> {
    if sentences.is_empty() {
        return Err(Error::Contract("latency bench needs at least one sentence".into()));
    }
    if repetitions < MIN_LATENCY_REPS {
        return Err(Error::Contract(format!(
            "latency bench needs at least {MIN_LATENCY_REPS} repetitions, got {repetitions}"
        )));
    }
    let prep = |m: &SentenceModel| {
        sentences.iter().map(|s| m.prepare(s)).collect::<Result<Vec<_>>>()
    };
    let (sb, ss) = (prep(baseline)?, prep(selector)?);
    let (mut tb, mut ts) = (Vec::with_capacity(repetitions), Vec::with_capacity(repetitions));
    time_per_sentence(baseline, &sb, 1)?;
    time_per_sentence(selector, &ss, 1)?;
    for _ in 0..repetitions {
        tb.push(time_per_sentence_once(baseline, &sb)?);
        ts.push(time_per_sentence_once(selector, &ss)?);
    }
    let (b, s) = (median(tb), median(ts));
    Ok(LatencyReport {
        baseline_ns_per_sentence: b,
        selector_ns_per_sentence: s,
        ratio: s / b,
        repetitions,
    })
}

fn time_per_sentence_once(model: &SentenceModel, seqs: &[TokenSequence]) -> Result<f64> {
    let t = Instant::now();
    std::hint::black_box(model.embed(seqs)?);
    Ok(t.elapsed().as_nanos() as f64 / seqs.len() as f64)
}

/// Histogram of pair cosines for one gold-score group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGroup {
    pub gold_lo: f64,
    pub gold_hi: f64,
    pub counts: Vec<usize>,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    /// `bins + 1` edges partitioning `[−1, 1]`.
    pub edges: Vec<f64>,
    pub groups: Vec<DensityGroup>,
}

pub const GOLD_GROUPS: usize = 5;
/// Gold score scale of the pair sets.
pub const GOLD_RANGE: (f64, f64) = (0.0, 5.0);

/// Index of the gold group of `score` on `[lo, hi]` split into five equal intervals,
/// the last one closed.
pub fn gold_group(score: f64, lo: f64, hi: f64) -> usize {
    let t = ((score - lo) / (hi - lo) * GOLD_GROUPS as f64).floor();
    (t.max(0.0) as usize).min(GOLD_GROUPS - 1)
}

/// Bins cosine similarities over `[−1, 1]`, the last bin closed.
pub fn cosine_bin(cos: f64, bins: usize) -> usize {
    let t = ((cos + 1.0) / 2.0 * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

pub fn density_from_similarities(sims: &[f64], gold: &[f64], bins: usize, gold_range: (f64, f64)) -> Result<DensityReport> {
    if bins < 2 {
        return Err(Error::Contract(format!("density needs at least 2 bins, got {bins}")));
    }
    if sims.len() != gold.len() {
        return Err(Error::Contract("similarity and gold lengths differ".into()));
    }
    let (lo, hi) = gold_range;
    if !(hi > lo) {
        return Err(Error::Contract(format!("empty gold range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / GOLD_GROUPS as f64;
    let mut groups: Vec<DensityGroup> = (0..GOLD_GROUPS)
        .map(|g| DensityGroup {
            gold_lo: lo + g as f64 * width,
            gold_hi: lo + (g + 1) as f64 * width,
            counts: vec![0; bins],
            size: 0,
        })
        .collect();
    for (&s, &y) in sims.iter().zip(gold) {
        let group = &mut groups[gold_group(y, lo, hi)];
        group.counts[cosine_bin(s, bins)] += 1;
        group.size += 1;
    }
    let edges = (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect();
    Ok(DensityReport { edges, groups })
}

/// Per-gold-group cosine histograms on the fixed `[0, 5]` gold scale.
pub fn density_export(model: &SentenceModel, pairs: &[SentencePairRecord], bins: usize) -> Result<DensityReport> {
    let sims = pair_similarities(model, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    density_from_similarities(&sims, &gold, bins, GOLD_RANGE)
}

impl DensityReport {
    /// `group  gold_lo  gold_hi  bin_lo  bin_hi  count` rows with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tgold_lo\tgold_hi\tbin_lo\tbin_hi\tcount\n");
        for (g, group) in self.groups.iter().enumerate() {
            for (b, c) in group.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{g}\t{}\t{}\t{}\t{}\t{c}\n",
                    group.gold_lo,
                    group.gold_hi,
                    self.edges[b],
                    self.edges[b + 1]
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    /// Mean over sentences of each fused block's gradient norm, in depth order.
    pub grad_norms: Vec<f64>,
    pub direct_weights: Vec<f64>,
    pub coefficient_of_variation: f64,
}

/// Gradient flow from `sum(v)` back into the fused blocks of `model`, averaged over
/// `sentences`. Averaging fusion (and 1-D/token-gate heads, which fuse by averaging)
/// is analysed as a plain mean.
pub fn model_gradient_flow(model: &SentenceModel, sentences: &[&str]) -> Result<FlowReport> {
    if sentences.is_empty() {
        return Err(Error::Contract("gradient flow needs at least one sentence".into()));
    }
    let n = model.fusion.config.n_blocks;
    let mut norms = vec![0.0; n];
    let mut direct = vec![0.0; n];
    for s in sentences {
        let seq = model.prepare(s)?;
        let blocks = model.encoder.encode(&seq, Dropout::Off)?;
        let selected = &blocks[blocks.len() - n..];
        let plan;
        let fusion = match (model.fusion.config.variant, &model.fusion.selector) {
            (FusionVariant::TwoD, Some(params)) => {
                plan = model.fusion.plan_for(seq.len())?;
                FlowFusion::Spatial { params, plan: &plan }
            }
            _ => FlowFusion::Average,
        };
        for (k, f) in gradient_flow_diagnostic(selected, fusion)?.iter().enumerate() {
            norms[k] += f.grad_norm / sentences.len() as f64;
            direct[k] += f.direct_weight / sentences.len() as f64;
        }
    }
    Ok(FlowReport {
        coefficient_of_variation: coefficient_of_variation(&norms),
        grad_norms: norms,
        direct_weights: direct,
    })
}

/// Sequences of `texts` prepared for `model`.
pub fn prepare_all(model: &SentenceModel, texts: &[&str]) -> Result<Vec<TokenSequence>> {
    texts.iter().map(|t| model.prepare(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_and_bins() {
        assert_eq!(gold_group(0.0, 0.0, 5.0), 0);
        assert_eq!(gold_group(0.99, 0.0, 5.0), 0);
        assert_eq!(gold_group(1.0, 0.0, 5.0), 1);
        assert_eq!(gold_group(5.0, 0.0, 5.0), 4);
        assert_eq!(cosine_bin(-1.0, 4), 0);
        assert_eq!(cosine_bin(1.0, 4), 3);
        assert_eq!(cosine_bin(0.0, 4), 2);
    }

    #[test]
    fn single_group_population() {
        let r = density_from_similarities(&[0.1, 0.5, -0.3], &[4.5, 4.9, 5.0], 10, (0.0, 5.0)).unwrap();
        let sizes: Vec<usize> = r.groups.iter().map(|g| g.size).collect();
        assert_eq!(sizes, vec![0, 0, 0, 0, 3]);
        assert_eq!(r.edges.len(), 11);
        assert_eq!((r.edges[0], r.edges[10]), (-1.0, 1.0));
        assert!(density_from_similarities(&[0.0], &[1.0], 1, (0.0, 5.0)).is_err());
    }

    #[test]
    fn mass_is_conserved() {
        let sims: Vec<f64> = (0..200).map(|i| ((i * 37 % 200) as f64 / 100.0) - 1.0).collect();
        let gold: Vec<f64> = (0..200).map(|i| (i % 51) as f64 / 10.0).collect();
        let r = density_from_similarities(&sims, &gold, 7, (0.0, 5.0)).unwrap();
        for g in &r.groups {
            assert_eq!(g.counts.iter().sum::<usize>(), g.size);
        }
        assert_eq!(r.groups.iter().map(|g| g.size).sum::<usize>(), 200);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 1 + 5 * 7);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
