use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use s2sent_core::selector::{parameter_audit, FusionVariant};
use s2sent_core::training::SentenceModel;
use s2sent_core::{Error, Result};
use s2sent_harness::acceptance::{self, Outcome};
use s2sent_harness::audit::{density_export, latency_bench, model_gradient_flow};
use s2sent_harness::config::{ExperimentConfig, GroupKey};
use s2sent_harness::data::load_pairs_tsv;
use s2sent_harness::experiment::{
    audit_model, last_block_baseline, run_experiment, train_model, ExperimentData, RunOptions,
};
use s2sent_harness::metrics::evaluate;

#[derive(Parser)]
#[command(name = "s2sent", version, about = "Train, evaluate and audit cross-block sentence fusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config (flat keys; unknown keys are rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model seed
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds (0..n)
    #[arg(long)]
    seeds: Option<usize>,
    /// Evaluation pairs TSV: sentence_a<TAB>sentence_b<TAB>score
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion variant: avg, 1d, 2d or token_gate
    #[arg(long)]
    variant: Option<FusionVariant>,
    /// Number of final blocks fused
    #[arg(long)]
    blocks: Option<usize>,
    /// Frequency parts m
    #[arg(long)]
    freqs: Option<usize>,
    /// Reduction ratio r
    #[arg(long)]
    reduction: Option<usize>,
    /// Model checkpoint to load instead of initializing from the seed
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes the checkpoint to --out and the log to stdout
    Train(Common),
    /// Spearman correlation of a model on a pair set
    Eval(Common),
    /// Run the configured grid over all seeds and write the JSON report
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Directory for per-run training logs
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Selector parameter count and its share of the backbone
    AuditParams {
        #[command(flatten)]
        common: Common,
        /// Backbone size for the ratio (default: this encoder)
        #[arg(long)]
        backbone_params: Option<usize>,
        /// Embedding width for the audit (overrides d_model)
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Per-sentence inference time against the last-block baseline
    BenchLatency {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Gradient norms reaching each fused block
    DiagnoseGradients(Common),
    /// Per-gold-group cosine histograms as TSV
    ExportDensity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Run the acceptance checks; exit code 2 on failure
    Selftest {
        /// Also run the desk-scale experiment (tens of minutes)
        #[arg(long)]
        full: bool,
    },
}

fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    load_config_with(c, |_| {})
}

/// Config with command-line overrides applied.
fn load_config_with(c: &Common, extra: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = c.seeds {
        cfg.seeds = None;
        cfg.n_seeds = n;
    }
    if let Some(s) = c.seed {
        cfg.seeds = Some(vec![s]);
    }
    if let Some(p) = &c.data {
        cfg.eval_path = Some(p.clone());
    }
    if let Some(v) = c.variant {
        cfg.variants = vec![v];
    }
    if let Some(b) = c.blocks {
        cfg.blocks = vec![b];
    }
    if let Some(m) = c.freqs {
        cfg.freqs = vec![m];
    }
    if let Some(r) = c.reduction {
        cfg.reductions = vec![r];
    }
    extra(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// The single model a non-sweep command works on: the first grid group and seed.
fn single(cfg: &ExperimentConfig) -> Result<(GroupKey, u64)> {
    let groups = cfg.groups();
    if groups.len() != 1 {
        eprintln!("note: config spans {} groups; using {}", groups.len(), groups[0]);
    }
    Ok((groups[0], cfg.seed_list()[0]))
}

fn model_for(c: &Common, cfg: &ExperimentConfig) -> Result<SentenceModel> {
    let (key, seed) = single(cfg)?;
    match &c.checkpoint {
        Some(p) => SentenceModel::load(cfg.model(&key), p),
        None => SentenceModel::init(cfg.model(&key), seed),
    }
}

fn eval_pairs(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let data = ExperimentData::load(cfg)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok(data)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| contract(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let (key, seed) = single(&cfg)?;
            let data = eval_pairs(&cfg)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            let trained = train_model(&cfg, &data, &key, seed, Some(&mut lock))?;
            let model = trained.model;
            let path = c.out.unwrap_or_else(|| PathBuf::from("model.ckpt"));
            model.save(&path)?;
            let (spearman, delta, ..) = audit_model(&cfg, &data, &model)?;
            eprintln!(
                "{key} seed {seed}: eval spearman {spearman:.4}, selector params {} ({:.4}%), checkpoint {}",
                delta.count,
                delta.ratio * 100.0,
                path.display()
            );
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let model = model_for(&c, &cfg)?;
            let pairs = match &c.data {
                Some(p) => {
                    let set = load_pairs_tsv(p)?;
                    set.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
                    set.records
                }
                None => eval_pairs(&cfg)?.eval,
            };
            emit(c.out.as_deref(), &format!("{:.6}\n", evaluate(&model, &pairs)?))?;
        }
        Command::Sweep { common, log_dir } => {
            let cfg = load_config(&common)?;
            let report = run_experiment(&cfg, &RunOptions { log_dir, progress: true })?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for g in &report.groups {
                eprintln!("{}: spearman {:.4} ± {:.4} (n={})", g.label, g.spearman.mean, g.spearman.std, g.spearman.n);
            }
            emit(common.out.as_deref(), &format!("{}\n", report.to_json()?))?;
        }
        Command::AuditParams { common, backbone_params, dim } => {
            let cfg = load_config_with(&common, |cfg| {
                if let Some(d) = dim {
                    cfg.d_model = d;
                }
            })?;
            let (key, seed) = single(&cfg)?;
            let backbone = match backbone_params.or(cfg.backbone_params) {
                Some(b) => b,
                None => SentenceModel::init(cfg.model(&key), seed)?.encoder.parameter_count(),
            };
            let d = cfg.d_model;
            let audit = parameter_audit(d, key.r, key.n_blocks, backbone)?;
            #[derive(Serialize)]
            struct Out {
                d: usize,
                r: usize,
                n_blocks: usize,
                backbone_params: usize,
                count: usize,
                ratio: f64,
            }
            let out = Out {
                d,
                r: key.r,
                n_blocks: key.n_blocks,
                backbone_params: backbone,
                count: audit.count,
                ratio: audit.ratio,
            };
            emit(common.out.as_deref(), &json(&out)?)?;
        }
        Command::BenchLatency { common, reps } => {
            let cfg = load_config(&common)?;
            let model = model_for(&common, &cfg)?;
            let data = eval_pairs(&cfg)?;
            let baseline = last_block_baseline(&model)?;
            let report = latency_bench(&baseline, &model, &data.probe_sentences(cfg.latency_sentences), reps)?;
            emit(common.out.as_deref(), &json(&report)?)?;
        }
        Command::DiagnoseGradients(c) => {
            let cfg = load_config(&c)?;
            let model = model_for(&c, &cfg)?;
            let data = eval_pairs(&cfg)?;
            let report = model_gradient_flow(&model, &data.probe_sentences(cfg.flow_sentences))?;
            emit(c.out.as_deref(), &json(&report)?)?;
        }
        Command::ExportDensity { common, bins } => {
            let cfg = load_config(&common)?;
            let model = model_for(&common, &cfg)?;
            let data = eval_pairs(&cfg)?;
            let report = density_export(&model, &data.eval, bins.unwrap_or(cfg.density_bins))?;
            emit(common.out.as_deref(), &report.to_tsv())?;
        }
        Command::Selftest { full } => {
            let mut outcomes: Vec<Outcome> = Vec::new();
            for o in acceptance::quick_checks() {
                println!("{}", o.line());
                outcomes.push(o);
            }
            if full {
                let desk = acceptance::run_desk_experiment(true)?;
                for o in [acceptance::desk_directional(&desk), acceptance::desk_pooling(&desk)] {
                    println!("{}", o.line());
                    outcomes.push(o);
                }
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
