//! Rank correlation, STS-style evaluation and the paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use s2sent_core::training::{cosine_similarity, SentenceModel};
use s2sent_core::{Error, Result};

use crate::data::SentencePairRecord;

/// 1-based ranks, ties sharing the mean of the positions they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Contract("correlation needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Contract("correlation of a constant sequence is undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Contract("spearman input contains NaN".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Cosine similarity of each pair under `model` in inference mode.
pub fn pair_similarities(model: &SentenceModel, pairs: &[SentencePairRecord]) -> Result<Vec<f64>> {
    let mut texts = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        texts.push(p.sentence_a.as_str());
        texts.push(p.sentence_b.as_str());
    }
    let emb = model.embed_texts(&texts)?;
    emb.chunks(2)
        .map(|ab| cosine_similarity(&ab[0], &ab[1]))
        .collect()
}

/// Spearman correlation between model cosine similarities and gold scores.
pub fn evaluate(model: &SentenceModel, pairs: &[SentencePairRecord]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Contract("evaluation needs at least two pairs".into()));
    }
    let sims = pair_similarities(model, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold_score).collect();
    spearman(&sims, &gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary { mean: 0.0, std: 0.0, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std, n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    /// Mean of `a − b`.
    pub mean_diff: f64,
    /// Saturates at `±f64::MAX` when every difference is the same nonzero value.
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p_two_sided: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_greater: f64,
}

/// Paired t-test on per-seed scores.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = summarize(&diffs);
    let df = diffs.len() - 1;
    if s.std == 0.0 {
        let (p_two_sided, p_greater) = match s.mean.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (0.0, 0.0),
            Some(std::cmp::Ordering::Less) => (0.0, 1.0),
            _ => (1.0, 0.5),
        };
        let t = if s.mean == 0.0 { 0.0 } else { s.mean.signum() * f64::MAX };
        return Ok(PairedTTest { mean_diff: s.mean, t, df, p_two_sided, p_greater });
    }
    let t = s.mean / (s.std / (diffs.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Contract(format!("t distribution: {e}")))?;
    let p_greater = 1.0 - dist.cdf(t);
    let p_two_sided = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest { mean_diff: s.mean, t, df, p_two_sided, p_greater })
}
