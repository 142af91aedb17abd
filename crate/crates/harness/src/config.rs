//! Flat JSON experiment configuration.
//!
//! Every key is optional. Grid keys take lists; each combination of
//! `variants × blocks × freqs × reductions × poolings` is one group, and each group is
//! run once per seed. Variants without a spectral squeeze (`avg`, `token_gate`) ignore
//! `freqs`/`reductions`, so they contribute one group per `blocks × poolings` entry.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use s2sent_core::encoder::EncoderConfig;
use s2sent_core::selector::{Bottleneck, FusionVariant, SelectorConfig};
use s2sent_core::training::{ModelConfig, Pooling, TrainConfig};
use s2sent_core::{Error, Result};

pub const DEFAULT_SEEDS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Explicit seed list; when absent, seeds are `0..n_seeds`.
    pub seeds: Option<Vec<u64>>,
    pub n_seeds: usize,

    pub variants: Vec<FusionVariant>,
    pub blocks: Vec<usize>,
    pub freqs: Vec<usize>,
    pub reductions: Vec<usize>,
    pub poolings: Vec<Pooling>,
    pub bottleneck: Bottleneck,

    pub vocab_size: usize,
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout_rate: f64,
    pub max_len: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub checkpoint: CheckpointPolicy,

    /// Synthetic corpus sizes, used when the matching path is absent.
    pub train_sentences: usize,
    pub dev_pairs: usize,
    pub eval_pairs: usize,
    pub corpus_seed: u64,
    /// One training sentence per line.
    pub train_path: Option<PathBuf>,
    /// Pair TSV files.
    pub dev_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,

    pub latency_reps: usize,
    pub latency_sentences: usize,
    pub flow_sentences: usize,
    pub density_bins: usize,
    /// Reference size for the parameter ratio; the encoder's own count when absent.
    pub backbone_params: Option<usize>,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let train = TrainConfig::default();
        let sel = SelectorConfig::default();
        ExperimentConfig {
            seeds: None,
            n_seeds: DEFAULT_SEEDS,
            variants: vec![FusionVariant::Avg, FusionVariant::TwoD],
            blocks: vec![sel.n_blocks],
            freqs: vec![sel.m],
            reductions: vec![sel.r],
            poolings: vec![Pooling::Avg],
            bottleneck: sel.bottleneck,
            vocab_size: enc.vocab_size,
            depth: enc.depth,
            d_model: enc.d,
            heads: enc.heads,
            ffn_mult: enc.ffn_mult,
            dropout_rate: enc.dropout_rate,
            max_len: enc.max_len,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            temperature: train.temperature,
            steps: train.steps,
            eval_every: train.eval_every,
            checkpoint: CheckpointPolicy::BestDev,
            train_sentences: 2000,
            dev_pairs: 200,
            eval_pairs: 500,
            corpus_seed: 0,
            train_path: None,
            dev_path: None,
            eval_path: None,
            latency_reps: 30,
            latency_sentences: 32,
            flow_sentences: 16,
            density_bins: 20,
            backbone_params: None,
            workers: 1,
        }
    }
}

/// Which weights a run is evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// The evaluation with the highest dev Spearman.
    #[default]
    BestDev,
    /// The weights after the last step.
    Final,
}

/// Keys accepted in a config file.
pub const KNOWN_KEYS: &[&str] = &[
    "seeds", "n_seeds", "variants", "blocks", "freqs", "reductions", "poolings", "bottleneck",
    "vocab_size", "depth", "d_model", "heads", "ffn_mult", "dropout_rate", "max_len",
    "learning_rate", "batch_size", "temperature", "steps", "eval_every", "checkpoint", "train_sentences",
    "dev_pairs", "eval_pairs", "corpus_seed", "train_path", "dev_path", "eval_path",
    "latency_reps", "latency_sentences", "flow_sentences", "density_bins", "backbone_params",
    "workers",
];

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub variant: FusionVariant,
    pub n_blocks: usize,
    pub m: usize,
    pub r: usize,
    pub pooling: Pooling,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/last{}", self.variant, self.n_blocks)?;
        if uses_spectrum(self.variant) {
            write!(f, "/m{}/r{}", self.m, self.r)?;
        }
        write!(f, "/{}", self.pooling)
    }
}

fn uses_spectrum(v: FusionVariant) -> bool {
    matches!(v, FusionVariant::OneD | FusionVariant::TwoD)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Contract(format!("config: {e}")))?;
        let map: &Map<String, Value> = value
            .as_object()
            .ok_or_else(|| Error::Contract("config: expected a JSON object".into()))?;
        let unknown: Vec<&str> = map
            .keys()
            .map(String::as_str)
            .filter(|k| !KNOWN_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Contract(format!("config: unknown keys: {}", unknown.join(", "))));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Contract(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.n_seeds as u64).collect(),
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            depth: self.depth,
            d: self.d_model,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            dropout_rate: self.dropout_rate,
            max_len: self.max_len,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            temperature: self.temperature,
            steps: self.steps,
            eval_every: self.eval_every,
            seed,
        }
    }

    pub fn model(&self, key: &GroupKey) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder(),
            selector: SelectorConfig {
                variant: key.variant,
                n_blocks: key.n_blocks,
                m: key.m,
                r: key.r,
                bottleneck: self.bottleneck,
            },
            pooling: key.pooling,
        }
    }

    /// Grid points in a fixed order, without duplicates.
    pub fn groups(&self) -> Vec<GroupKey> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &n_blocks in &self.blocks {
                for &m in &self.freqs {
                    for &r in &self.reductions {
                        for &pooling in &self.poolings {
                            let (m, r) = if uses_spectrum(variant) {
                                (m, r)
                            } else {
                                (self.freqs[0], self.reductions[0])
                            };
                            let key = GroupKey { variant, n_blocks, m, r, pooling };
                            if seen.insert(key) {
                                out.push(key);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("variants", self.variants.is_empty()),
            ("blocks", self.blocks.is_empty()),
            ("freqs", self.freqs.is_empty()),
            ("reductions", self.reductions.is_empty()),
            ("poolings", self.poolings.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Contract(format!("config: {name} must not be empty")));
        }
        let seeds = self.seed_list();
        if seeds.is_empty() {
            return Err(Error::Contract("config: at least one seed is required".into()));
        }
        if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(Error::Contract("config: seeds must be distinct".into()));
        }
        if self.workers == 0 {
            return Err(Error::Contract("config: workers must be at least 1".into()));
        }
        if self.density_bins < 2 {
            return Err(Error::Contract("config: density_bins must be at least 2".into()));
        }
        if self.train_path.is_none() && self.train_sentences == 0 {
            return Err(Error::Contract("config: train_sentences must be positive".into()));
        }
        if self.eval_path.is_none() && self.eval_pairs < 2 {
            return Err(Error::Contract("config: eval_pairs must be at least 2".into()));
        }
        if self.dev_path.is_none() && self.dev_pairs < 2 {
            return Err(Error::Contract("config: dev_pairs must be at least 2".into()));
        }
        self.train(0).validate()?;
        for key in self.groups() {
            self.model(&key).validate()?;
        }
        Ok(())
    }
}
