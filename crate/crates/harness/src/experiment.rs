//! Grid × seed experiment runs and the JSON report.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use s2sent_core::encoder::TokenSequence;
use s2sent_core::numerics::rng;
use s2sent_core::selector::{Fusion, FusionVariant, SelectorConfig};
use s2sent_core::training::{train, LogEntry, ModelConfig, SentenceModel};
use s2sent_core::{Error, Result};

use crate::audit::{
    density_from_similarities, latency_bench, GOLD_RANGE, model_gradient_flow, DensityReport, FlowReport, LatencyReport,
};
use crate::config::{CheckpointPolicy, ExperimentConfig, GroupKey};
use crate::data::{load_pairs_tsv, synth_corpus, synth_sentences, SentencePairRecord};
use crate::metrics::{evaluate, pair_similarities, paired_t_test, spearman, summarize, PairedTTest, Summary};

const DEV_CORPUS_STREAM: u64 = 0xde5;

/// Training sentences and the dev/eval pair sets of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: Vec<String>,
    pub dev: Vec<SentencePairRecord>,
    pub eval: Vec<SentencePairRecord>,
    pub warnings: Vec<String>,
}

fn load_sentences(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

impl ExperimentData {
    /// Files named in `cfg`, or the synthetic corpus where no file is given.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut pairs = |path: &Option<PathBuf>, n: usize, seed: u64| -> Result<Vec<SentencePairRecord>> {
            match path {
                Some(p) => {
                    let set = load_pairs_tsv(p)?;
                    warnings.extend(set.warnings);
                    Ok(set.records)
                }
                None => synth_corpus(n, seed),
            }
        };
        let eval = pairs(&cfg.eval_path, cfg.eval_pairs, cfg.corpus_seed)?;
        let dev_seed = rng::derive_seed(cfg.corpus_seed, &[DEV_CORPUS_STREAM]);
        let dev = pairs(&cfg.dev_path, cfg.dev_pairs, dev_seed)?;
        let train = match &cfg.train_path {
            Some(p) => load_sentences(p)?,
            None => synth_sentences(cfg.train_sentences, cfg.corpus_seed),
        };
        if train.is_empty() {
            return Err(Error::Contract("no training sentences".into()));
        }
        for (name, set) in [("dev", &dev), ("eval", &eval)] {
            if set.len() < 2 {
                return Err(Error::Contract(format!("{name} set needs at least two pairs")));
            }
        }
        Ok(ExperimentData { train, dev, eval, warnings })
    }

    /// First sentences of the eval pairs, used for latency and gradient-flow probes.
    pub fn probe_sentences(&self, n: usize) -> Vec<&str> {
        self.eval.iter().take(n.max(1)).map(|p| p.sentence_a.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamDelta {
    pub count: usize,
    pub ratio: f64,
}

/// Everything measured for one (group, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub group: GroupKey,
    pub seed: u64,
    /// Eval-set Spearman of the kept weights.
    pub spearman: f64,
    pub selected_step: usize,
    pub final_loss: Option<f64>,
    pub log: Vec<LogEntry>,
    pub delta_params: ParamDelta,
    pub latency: LatencyReport,
    pub gradient_flow: FlowReport,
    pub density: DensityReport,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: GroupKey,
    pub label: String,
    pub spearman: Summary,
    pub latency_ratio: Summary,
}

/// Paired t-test of `a` against `b` over the shared seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: GroupKey,
    pub b: GroupKey,
    pub test: PairedTTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub groups: Vec<GroupSummary>,
    pub comparisons: Vec<Comparison>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Contract(format!("report: {e}")))
    }

    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for run in &mut r.runs {
            run.elapsed_ms = 0.0;
            run.latency = LatencyReport {
                baseline_ns_per_sentence: 0.0,
                selector_ns_per_sentence: 0.0,
                ratio: 0.0,
                repetitions: run.latency.repetitions,
            };
        }
        for g in &mut r.groups {
            g.latency_ratio = Summary { mean: 0.0, std: 0.0, n: g.latency_ratio.n };
        }
        r
    }

    pub fn runs_of(&self, group: &GroupKey) -> Vec<&RunRecord> {
        self.runs.iter().filter(|r| &r.group == group).collect()
    }

    pub fn group(&self, group: &GroupKey) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| &g.group == group)
    }

    pub fn comparison(&self, a: &GroupKey, b: &GroupKey) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| &c.a == a && &c.b == b)
    }
}

/// Where per-run training logs go, and whether to print progress on stderr.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub log_dir: Option<PathBuf>,
    pub progress: bool,
}

fn log_name(key: &GroupKey, seed: u64) -> String {
    format!("{}_seed{seed}.tsv", key.to_string().replace('/', "_"))
}

/// Last-block averaging model sharing `model`'s encoder, the latency reference.
pub fn last_block_baseline(model: &SentenceModel) -> Result<SentenceModel> {
    let selector = SelectorConfig {
        variant: FusionVariant::Avg,
        n_blocks: 1,
        ..model.config.selector
    };
    let config = ModelConfig { selector, ..model.config };
    let fusion = Fusion::init(selector, config.encoder.d, &mut rng::stream(0, &[]))?;
    Ok(SentenceModel {
        config,
        encoder: model.encoder.clone(),
        fusion,
    })
}

/// A trained model and how it was chosen.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: SentenceModel,
    pub log: Vec<LogEntry>,
    pub final_loss: Option<f64>,
    /// Step of the kept weights (0 for the untrained model).
    pub selected_step: usize,
}

/// Trains one model. Under [`CheckpointPolicy::BestDev`] the weights with the highest
/// dev Spearman among the evaluations are kept, the earliest on ties.
pub fn train_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    key: &GroupKey,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<Trained> {
    let mut model = SentenceModel::init(cfg.model(key), seed)?;
    let seqs = data
        .train
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<Vec<TokenSequence>>>()?;
    let mut best: Option<(f64, SentenceModel)> = None;
    let mut dev = |m: &SentenceModel| {
        let rho = evaluate(m, &data.dev)?;
        if cfg.checkpoint == CheckpointPolicy::BestDev && best.as_ref().is_none_or(|(b, _)| rho > *b) {
            best = Some((rho, m.clone()));
        }
        Ok(rho)
    };
    let history = train(&mut model, &seqs, &cfg.train(seed), &mut dev, log)?;
    let mut selected_step = history.losses.len();
    if let Some((rho, kept)) = best {
        selected_step = history
            .log
            .iter()
            .find(|e| e.dev_spearman == rho)
            .map_or(selected_step, |e| e.step);
        model = kept;
    }
    Ok(Trained {
        model,
        log: history.log,
        final_loss: history.losses.last().copied(),
        selected_step,
    })
}

/// Eval score plus the parameter, latency, gradient-flow and density audits of a
/// trained model.
pub fn audit_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    model: &SentenceModel,
) -> Result<(f64, ParamDelta, LatencyReport, FlowReport, DensityReport)> {
    let sims = pair_similarities(model, &data.eval)?;
    let gold: Vec<f64> = data.eval.iter().map(|p| p.gold_score).collect();
    let spearman = spearman(&sims, &gold)?;
    let count = model.fusion.parameter_count();
    let backbone = cfg.backbone_params.unwrap_or_else(|| model.encoder.parameter_count());
    let delta = ParamDelta {
        count,
        ratio: count as f64 / backbone as f64,
    };
    let baseline = last_block_baseline(model)?;
    let latency = latency_bench(
        &baseline,
        model,
        &data.probe_sentences(cfg.latency_sentences),
        cfg.latency_reps,
    )?;
    let flow = model_gradient_flow(model, &data.probe_sentences(cfg.flow_sentences))?;
    let density = density_from_similarities(&sims, &gold, cfg.density_bins, GOLD_RANGE)?;
    Ok((spearman, delta, latency, flow, density))
}

fn run_one(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    key: &GroupKey,
    seed: u64,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let start = Instant::now();
    let mut file = match &opts.log_dir {
        Some(dir) => Some(fs::File::create(dir.join(log_name(key, seed)))?),
        None => None,
    };
    let trained = train_model(cfg, data, key, seed, file.as_mut().map(|f| f as &mut dyn Write))?;
    let (spearman, delta_params, latency, gradient_flow, density) =
        audit_model(cfg, data, &trained.model)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    if opts.progress {
        eprintln!("{key} seed {seed}: spearman {spearman:.4} ({:.1} s)", elapsed_ms / 1e3);
    }
    Ok(RunRecord {
        group: *key,
        seed,
        spearman,
        selected_step: trained.selected_step,
        final_loss: trained.final_loss,
        log: trained.log,
        delta_params,
        latency,
        gradient_flow,
        density,
        elapsed_ms,
    })
}

/// Group summaries and all pairwise comparisons, recomputed from the run records.
pub fn aggregate(groups: &[GroupKey], seeds: &[u64], runs: &[RunRecord]) -> (Vec<GroupSummary>, Vec<Comparison>) {
    let scores = |g: &GroupKey| -> Vec<f64> {
        seeds
            .iter()
            .filter_map(|s| runs.iter().find(|r| &r.group == g && r.seed == *s))
            .map(|r| r.spearman)
            .collect()
    };
    let summaries = groups
        .iter()
        .map(|g| {
            let ratios: Vec<f64> = runs.iter().filter(|r| &r.group == g).map(|r| r.latency.ratio).collect();
            GroupSummary {
                group: *g,
                label: g.to_string(),
                spearman: summarize(&scores(g)),
                latency_ratio: summarize(&ratios),
            }
        })
        .collect();
    let mut comparisons = Vec::new();
    for (i, a) in groups.iter().enumerate() {
        for b in &groups[i + 1..] {
            for (x, y) in [(a, b), (b, a)] {
                if let Ok(test) = paired_t_test(&scores(x), &scores(y)) {
                    comparisons.push(Comparison { a: *x, b: *y, test });
                }
            }
        }
    }
    (summaries, comparisons)
}

/// Trains, evaluates and audits every grid group under every seed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    if let Some(dir) = &opts.log_dir {
        fs::create_dir_all(dir)?;
    }
    let groups = cfg.groups();
    let seeds = cfg.seed_list();
    let jobs: Vec<(GroupKey, u64)> = groups
        .iter()
        .flat_map(|g| seeds.iter().map(move |&s| (*g, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Contract(format!("worker pool: {e}")))?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|(g, s)| run_one(cfg, &data, g, *s, opts))
            .collect::<Result<Vec<_>>>()
    })?;
    let (summaries, comparisons) = aggregate(&groups, &seeds, &runs);
    Ok(ExperimentReport {
        config: cfg.clone(),
        seeds,
        runs,
        groups: summaries,
        comparisons,
        warnings: data.warnings,
    })
}
