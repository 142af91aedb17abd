//! End-to-end checks of the selector's mathematical properties and the desk-scale
//! experiment, shared by `s2sent selftest` and the acceptance test target.

use std::time::{Duration, Instant};

use rand::Rng;

use s2sent_core::encoder::{EncoderConfig, TokenSequence};
use s2sent_core::numerics::{check_graph_gradients, rng, Tensor};
use s2sent_core::selector::{
    coefficient_of_variation, gradient_flow_diagnostic, parameter_audit, ss_forward_2d,
    stack_blocks, Bottleneck, FlowFusion, FusionVariant, SelectorConfig, SelectorParams,
};
use s2sent_core::spectral::{
    dct2_orthonormal, fs_squeeze, gap_squeeze, idct2_orthonormal, select_low_frequencies,
};
use s2sent_core::training::{contrastive_loss_node, ModelConfig, Pooling, SentenceModel};
use s2sent_core::Result;

use crate::config::{ExperimentConfig, GroupKey};
use crate::experiment::{run_experiment, train_model, ExperimentData, ExperimentReport, RunOptions};
use crate::metrics::{evaluate, paired_t_test, summarize};

/// Result of one criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Headline measurement (an error, a ratio or a score difference).
    pub measured: f64,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {}. {}: {} ({:.2} s, limit {} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        )
    }
}

fn timed(
    id: u8,
    name: &'static str,
    limit: Duration,
    f: impl FnOnce() -> Result<(bool, f64, String)>,
) -> Outcome {
    let start = Instant::now();
    let (passed, measured, detail) = f().unwrap_or_else(|e| (false, f64::NAN, format!("error: {e}")));
    let elapsed = start.elapsed();
    Outcome {
        id,
        name,
        passed: passed && elapsed < limit,
        measured,
        detail,
        elapsed,
        limit,
    }
}

fn random_tensor<R: Rng>(shape: &[usize], scale: f64, r: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-scale..scale))
}

const INSTANCES: usize = 1000;

pub fn gap_dct_equivalence() -> Outcome {
    timed(1, "GAP equals the lowest DCT component", Duration::from_secs(5), || {
        let mut worst: f64 = 0.0;
        for i in 0..INSTANCES {
            let mut r = rng::stream(0x61, &[i as u64]);
            let (n, l, d) = (r.gen_range(1..=4), r.gen_range(1..=16), r.gen_range(1..=32));
            let blocks: Vec<Tensor> = (0..n).map(|_| random_tensor(&[l, d], 2.0, &mut r)).collect();
            let stack = stack_blocks(&blocks)?;
            let fs = fs_squeeze(&stack, &select_low_frequencies(n, l, 1)?)?.into_tensor();
            let gap = gap_squeeze(&stack).into_tensor();
            for (a, b) in fs.data().iter().zip(gap.data()) {
                worst = worst.max((a - (n * l) as f64 * b).abs());
            }
        }
        Ok((worst <= 1e-10, worst, format!("max |fs − N·L·gap| = {worst:.3e} (tol 1e-10)")))
    })
}

pub fn dct_roundtrip() -> Outcome {
    timed(2, "orthonormal DCT roundtrip and Parseval", Duration::from_secs(5), || {
        let (mut rec, mut energy): (f64, f64) = (0.0, 0.0);
        for i in 0..INSTANCES {
            let mut r = rng::stream(0x62, &[i as u64]);
            let x = random_tensor(&[r.gen_range(1..=8), r.gen_range(1..=16)], 3.0, &mut r);
            let c = dct2_orthonormal(&x)?;
            let back = idct2_orthonormal(&c)?;
            for (a, b) in x.data().iter().zip(back.data()) {
                rec = rec.max((a - b).abs());
            }
            let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
            energy = energy.max((sq(&x) - sq(&c)).abs());
        }
        Ok((
            rec <= 1e-10 && energy <= 1e-8,
            rec,
            format!("max roundtrip error {rec:.3e} (tol 1e-10), max energy gap {energy:.3e} (tol 1e-8)"),
        ))
    })
}

pub fn selection_weight_laws() -> Outcome {
    timed(3, "selection weights sum to one, stay convex, ratio below e", Duration::from_secs(10), || {
        let (mut sum_err, mut hull_excess, mut ratio): (f64, f64, f64) = (0.0, 0.0, 1.0);
        for i in 0..INSTANCES {
            let mut r = rng::stream(0x63, &[i as u64]);
            let (n, l) = (r.gen_range(1..=4), r.gen_range(1..=16));
            let fits: Vec<usize> = [1, 2, 4].into_iter().filter(|&m| m <= n * l).collect();
            let m = fits[r.gen_range(0..fits.len())];
            let d = m * [2, 4, 8][r.gen_range(0..3)];
            let red = [1, 2][r.gen_range(0..2)];
            let bottleneck = if r.gen_bool(0.5) { Bottleneck::Relu } else { Bottleneck::Tanh };
            let blocks: Vec<Tensor> = (0..n).map(|_| random_tensor(&[l, d], 1.0, &mut r)).collect();
            let params = SelectorParams::init(d, red, n, bottleneck, &mut r)?;
            let plan = select_low_frequencies(n, l, m)?;
            let fused = ss_forward_2d(&blocks, &params, &plan)?;
            for k in 0..d {
                let col: Vec<f64> = (0..n).map(|b| fused.weights.row(b)[k]).collect();
                sum_err = sum_err.max((col.iter().sum::<f64>() - 1.0).abs());
                let (lo, hi) = col.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &w| (lo.min(w), hi.max(w)));
                ratio = ratio.max(hi / lo);
                for t in 0..l {
                    let vals: Vec<f64> = blocks.iter().map(|b| b.row(t)[k]).collect();
                    let lo = vals.iter().copied().fold(f64::MAX, f64::min);
                    let hi = vals.iter().copied().fold(f64::MIN, f64::max);
                    let v = fused.v.row(t)[k];
                    hull_excess = hull_excess.max(lo - v).max(v - hi);
                }
            }
        }
        let e = std::f64::consts::E;
        Ok((
            sum_err <= 1e-12 && hull_excess <= 1e-12 && ratio < e,
            sum_err,
            format!(
                "max |Σw − 1| = {sum_err:.3e} (tol 1e-12), hull excess {hull_excess:.3e}, max weight ratio {ratio:.6} (< e)"
            ),
        ))
    })
}

/// The gradient-check configuration: depth 2, D 8, sequences of length 3, B = 2.
pub fn micro_gradient_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 16,
            depth: 2,
            d: 8,
            heads: 2,
            ffn_mult: 2,
            dropout_rate: 0.1,
            max_len: 3,
        },
        selector: SelectorConfig {
            variant: FusionVariant::TwoD,
            n_blocks: 2,
            m: 2,
            r: 2,
            bottleneck: Bottleneck::Relu,
        },
        pooling: Pooling::Avg,
    }
}

pub fn end_to_end_gradients() -> Outcome {
    timed(4, "end-to-end gradients match finite differences", Duration::from_secs(120), || {
        let cfg = micro_gradient_config();
        let mut worst: f64 = 0.0;
        for i in 0..20u64 {
            let model = SentenceModel::init(cfg, 1000 + i)?;
            let mut r = rng::stream(0x64, &[i]);
            let seqs = (0..2)
                .map(|_| TokenSequence::new((0..3).map(|_| r.gen_range(3..16)).collect(), 16))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let inputs: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
            let err = check_graph_gradients(
                |g, ids| {
                    let bound = model.bind_ids(ids)?;
                    contrastive_loss_node(&model, g, &bound, &refs, r_seed(i), 0.05)
                },
                &inputs,
                1e-5,
            )?;
            worst = worst.max(err);
        }
        Ok((worst < 1e-4, worst, format!("max relative error {worst:.3e} over 20 instances (tol 1e-4)")))
    })
}

fn r_seed(i: u64) -> u64 {
    rng::derive_seed(0x64d, &[i])
}

pub fn gradient_flow_differentiation() -> Outcome {
    timed(5, "gradient flow: uniform under averaging, differentiated under selection", Duration::from_secs(30), || {
        let (mut avg_err, mut min_cv, mut inactive): (f64, f64, usize) = (0.0, f64::MAX, 0);
        for i in 0..20u64 {
            let mut r = rng::stream(0x65, &[i]);
            let (n, l, d) = (3, 6, 32);
            let blocks: Vec<Tensor> = (0..n)
                .map(|k| random_tensor(&[l, d], 1.0 + k as f64, &mut r))
                .collect();
            for f in gradient_flow_diagnostic(&blocks, FlowFusion::Average)? {
                avg_err = avg_err.max((f.direct_weight - 1.0 / n as f64).abs());
                let grad = f.grad.expect("gradient kept");
                for &gv in grad.data() {
                    avg_err = avg_err.max((gv - 1.0 / n as f64).abs());
                }
            }
            let params = SelectorParams::init(d, 4, n, Bottleneck::Relu, &mut r)?;
            let plan = select_low_frequencies(n, l, 4)?;
            let fused = ss_forward_2d(&blocks, &params, &plan)?;
            if fused.weights.data().iter().all(|w| (w - 1.0 / n as f64).abs() < 1e-15) {
                inactive += 1;
            }
            let flows = gradient_flow_diagnostic(&blocks, FlowFusion::Spatial { params: &params, plan: &plan })?;
            let norms: Vec<f64> = flows.iter().map(|f| f.grad_norm).collect();
            min_cv = min_cv.min(coefficient_of_variation(&norms));
        }
        Ok((
            avg_err == 0.0 && min_cv > 1e-6 && inactive == 0,
            min_cv,
            format!(
                "averaging: max deviation from 1/N {avg_err:.1e} (exact); selection: min CV of block gradient norms {min_cv:.4} (> 1e-6), degenerate instances {inactive}"
            ),
        ))
    })
}

pub const REFERENCE_BACKBONE: usize = 110_000_000;

pub fn parameter_audit_check() -> Outcome {
    timed(6, "selector parameter overhead", Duration::from_secs(1), || {
        let d = 768;
        let (mut worst_ratio, mut mismatches, mut cases): (f64, usize, usize) = (0.0, 0, 0);
        for r in (12..=d).filter(|r| d % r == 0) {
            for n in 1..=6 {
                let audit = parameter_audit(d, r, n, REFERENCE_BACKBONE)?;
                let closed = d * d / r * (1 + n);
                let built = SelectorParams::init(d, r, n, Bottleneck::Relu, &mut rng::stream(6, &[]))?;
                if audit.count != closed || built.parameter_count() != closed {
                    mismatches += 1;
                }
                worst_ratio = worst_ratio.max(audit.ratio);
                cases += 1;
            }
        }
        Ok((
            worst_ratio <= 0.0034 && mismatches == 0,
            worst_ratio,
            format!(
                "max ratio {:.4}% over {cases} (N, r) cases (≤ 0.34%), count mismatches vs D²/r·(1+N): {mismatches}",
                worst_ratio * 100.0
            ),
        ))
    })
}

/// The two desk-scale experiment configs: fusion variants with average pooling, and
/// the 4-part selector with first-token pooling.
pub fn desk_configs() -> (ExperimentConfig, ExperimentConfig) {
    let base = ExperimentConfig {
        n_seeds: 7,
        blocks: vec![3],
        train_sentences: 2000,
        eval_pairs: 500,
        steps: 1000,
        ..ExperimentConfig::default()
    };
    let variants = ExperimentConfig {
        variants: vec![FusionVariant::Avg, FusionVariant::TwoD],
        freqs: vec![4, 1],
        poolings: vec![Pooling::Avg],
        ..base.clone()
    };
    let first = ExperimentConfig {
        variants: vec![FusionVariant::TwoD],
        freqs: vec![4],
        poolings: vec![Pooling::First],
        ..base
    };
    (variants, first)
}

pub struct DeskRun {
    pub variants: ExperimentReport,
    pub first: ExperimentReport,
    pub elapsed: Duration,
}

pub fn run_desk_experiment(progress: bool) -> Result<DeskRun> {
    let start = Instant::now();
    let (a, b) = desk_configs();
    let opts = RunOptions { log_dir: None, progress };
    let variants = run_experiment(&a, &opts)?;
    let first = run_experiment(&b, &opts)?;
    Ok(DeskRun { variants, first, elapsed: start.elapsed() })
}

fn key(variant: FusionVariant, m: usize, pooling: Pooling) -> GroupKey {
    let sel = SelectorConfig::default();
    GroupKey { variant, n_blocks: 3, m: if variant == FusionVariant::TwoD { m } else { 4 }, r: sel.r, pooling }
}

fn scores(report: &ExperimentReport, k: &GroupKey) -> Vec<f64> {
    report
        .seeds
        .iter()
        .filter_map(|s| report.runs.iter().find(|r| &r.group == k && r.seed == *s))
        .map(|r| r.spearman)
        .collect()
}

pub fn desk_directional(run: &DeskRun) -> Outcome {
    let mut out = timed(7, "desk-scale: selection beats averaging", Duration::from_secs(30 * 60), || {
        let avg = scores(&run.variants, &key(FusionVariant::Avg, 4, Pooling::Avg));
        let ss4 = scores(&run.variants, &key(FusionVariant::TwoD, 4, Pooling::Avg));
        let ss1 = scores(&run.variants, &key(FusionVariant::TwoD, 1, Pooling::Avg));
        let (ma, m4, m1) = (summarize(&avg).mean, summarize(&ss4).mean, summarize(&ss1).mean);
        let t = paired_t_test(&ss4, &avg)?;
        let tf = paired_t_test(&ss4, &ss1)?;
        Ok((
            m4 >= ma && t.p_greater < 0.05 && m4 >= m1,
            m4 - ma,
            format!(
                "mean ρ avg {ma:.4}, 2d m=4 {m4:.4}, 2d m=1 {m1:.4}; 2d−avg {:+.4} (one-sided p {:.4}, need < 0.05); m4−m1 {:+.4} (p {:.4}, reported)",
                m4 - ma,
                t.p_greater,
                m4 - m1,
                tf.p_greater
            ),
        ))
    });
    out.elapsed = run.elapsed;
    out.passed = out.passed && run.elapsed < out.limit;
    out
}

pub fn desk_pooling(run: &DeskRun) -> Outcome {
    let mut out = timed(8, "desk-scale: first-token pooling underperforms average", Duration::from_secs(30 * 60), || {
        let avg = scores(&run.variants, &key(FusionVariant::TwoD, 4, Pooling::Avg));
        let first = scores(&run.first, &key(FusionVariant::TwoD, 4, Pooling::First));
        let (ma, mf) = (summarize(&avg).mean, summarize(&first).mean);
        let t = paired_t_test(&avg, &first)?;
        Ok((
            mf < ma,
            ma - mf,
            format!("mean ρ avg pooling {ma:.4}, first-token {mf:.4}; gap {:+.4} (p {:.2e})", ma - mf, t.p_greater),
        ))
    });
    out.elapsed = run.elapsed;
    out.passed = out.passed && run.elapsed < out.limit;
    out
}

/// Small experiment used by the determinism check.
pub fn determinism_config() -> ExperimentConfig {
    ExperimentConfig {
        n_seeds: 2,
        variants: vec![FusionVariant::Avg, FusionVariant::TwoD],
        vocab_size: 1024,
        depth: 3,
        d_model: 32,
        heads: 2,
        ffn_mult: 2,
        steps: 60,
        eval_every: 20,
        train_sentences: 200,
        dev_pairs: 40,
        eval_pairs: 80,
        blocks: vec![2],
        reductions: vec![4],
        ..ExperimentConfig::default()
    }
}

pub fn determinism() -> Outcome {
    timed(9, "determinism and checkpoint roundtrip", Duration::from_secs(300), || {
        let cfg = determinism_config();
        let opts = RunOptions::default();
        let a = run_experiment(&cfg, &opts)?.without_timing().to_json()?;
        let b = run_experiment(&cfg, &opts)?.without_timing().to_json()?;
        let data = ExperimentData::load(&cfg)?;
        let key = cfg.groups()[1];
        let model = train_model(&cfg, &data, &key, 5, None)?.model;
        let before = evaluate(&model, &data.eval)?;
        let dir = std::env::temp_dir().join(format!("s2sent-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("model.ckpt");
        model.save(&path)?;
        let loaded = SentenceModel::load(cfg.model(&key), &path);
        std::fs::remove_dir_all(&dir)?;
        let after = evaluate(&loaded?, &data.eval)?;
        let same_json = a == b;
        let same_score = before.to_bits() == after.to_bits();
        Ok((
            same_json && same_score,
            (before - after).abs(),
            format!(
                "reports identical modulo timing: {same_json}; eval ρ before/after checkpoint {before:.17} / {after:.17} (bit-exact: {same_score})"
            ),
        ))
    })
}

/// Criteria that run in seconds to minutes.
pub fn quick_checks() -> Vec<Outcome> {
    vec![
        gap_dct_equivalence(),
        dct_roundtrip(),
        selection_weight_laws(),
        end_to_end_gradients(),
        gradient_flow_differentiation(),
        parameter_audit_check(),
        determinism(),
    ]
}
