use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::encoder::EncoderConfig;
use crate::numerics::{check_graph_gradients, finite_difference_gradient, relative_error};
use crate::selector::{Bottleneck, FusionVariant, SelectorConfig};

fn v(xs: &[f64]) -> Tensor {
    Tensor::new(vec![xs.len()], xs.to_vec()).unwrap()
}

fn random_rows(b: usize, d: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng::stream(seed, &[]);
    (0..b).map(|_| Tensor::from_fn(&[d], |_| r.gen_range(-2.0..2.0))).collect()
}

fn small_config(variant: FusionVariant, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { vocab_size: 64, depth: 3, d: 16, heads: 2, ffn_mult: 2, dropout_rate: 0.1, max_len: 10 },
        selector: SelectorConfig { variant, n_blocks: 2, m: 2, r: 4, bottleneck: Bottleneck::Relu },
        pooling,
    }
}

const WORDS: &[&str] = &[
    "red", "blue", "cat", "dog", "runs", "sleeps", "near", "the", "house", "river", "green",
    "bird", "sings", "under", "tree", "small",
];

fn toy_corpus(model: &SentenceModel, n: usize) -> Vec<TokenSequence> {
    let mut r = rng::stream(77, &[]);
    (0..n)
        .map(|_| {
            let len = r.gen_range(3..7);
            let words: Vec<&str> = (0..len).map(|_| WORDS[r.gen_range(0..WORDS.len())]).collect();
            model.prepare(&words.join(" ")).unwrap()
        })
        .collect()
}

#[test]
fn cosine_examples() {
    let x = v(&[0.3, -1.2, 2.0]);
    assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
    let c = cosine_similarity(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
    assert!((c - 32.0 / (14f64.sqrt() * 77f64.sqrt())).abs() < 1e-15);
    assert!((c - 0.974631).abs() < 1e-6);
    assert!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).is_err());
    assert!(cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])).is_err());
}

#[test]
fn info_nce_examples() {
    let one = ContrastiveBatch::new(vec![v(&[1.0, 2.0])], vec![v(&[-3.0, 0.5])]).unwrap();
    assert_eq!(info_nce_loss(&one, 0.05).unwrap(), 0.0);

    let same = ContrastiveBatch::new(vec![v(&[1.0, 1.0]); 4], vec![v(&[1.0, 1.0]); 4]).unwrap();
    assert!((info_nce_loss(&same, 0.05).unwrap() - 4f64.ln()).abs() < 1e-12);

    let e = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
    let two = ContrastiveBatch::new(e.to_vec(), e.to_vec()).unwrap();
    let want = (1.0 + (-20f64).exp()).ln();
    assert!((want - 2.06e-9).abs() < 1e-11);
    assert!((info_nce_loss(&two, 0.05).unwrap() - want).abs() < 1e-15);

    assert!(info_nce_loss(&two, 0.0).is_err());
    assert!(info_nce_loss(&two, -1.0).is_err());
    assert!(ContrastiveBatch::new(vec![v(&[1.0])], vec![]).is_err());
    assert!(ContrastiveBatch::new(vec![v(&[1.0])], vec![v(&[f64::NAN])]).is_err());
}

fn graph_loss(anchors: &[Tensor], positives: &[Tensor], tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&anchors.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>()).unwrap());
    let p = g.constant(Tensor::from_rows(&positives.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>()).unwrap());
    let l = info_nce_node(&mut g, a, p, tau).unwrap();
    g.value(l).data()[0]
}

proptest! {
    #[test]
    fn loss_laws(b in 1usize..6, d in 1usize..8, seed in any::<u64>(), c in 0.01f64..100.0, tau in 0.02f64..2.0) {
        let a = random_rows(b, d, seed);
        let p = random_rows(b, d, seed ^ 1);
        prop_assume!(a.iter().chain(&p).all(|t| t.norm() > 1e-3));
        let batch = ContrastiveBatch::new(a.clone(), p.clone()).unwrap();
        let loss = info_nce_loss(&batch, tau).unwrap();
        prop_assert!(loss >= 0.0);
        if b >= 2 {
            prop_assert!(loss > 0.0);
        }
        let scaled = ContrastiveBatch::new(
            a.iter().map(|t| t.scale(c)).collect(),
            p.iter().map(|t| t.scale(c)).collect(),
        ).unwrap();
        prop_assert!((info_nce_loss(&scaled, tau).unwrap() - loss).abs() < 1e-10);
        // Graph form against the loop form.
        prop_assert!((graph_loss(&a, &p, tau) - loss).abs() < 1e-10 * loss.max(1.0));
    }

    #[test]
    fn loss_gradient_matches_finite_differences(b in 1usize..=4, d in 1usize..=8, seed in any::<u64>()) {
        let a = random_rows(b, d, seed);
        let p = random_rows(b, d, seed ^ 5);
        prop_assume!(a.iter().chain(&p).all(|t| t.norm() > 0.1));
        let rows = |ts: &[Tensor]| Tensor::from_rows(&ts.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>()).unwrap();
        let err = check_graph_gradients(
            |g, ids| info_nce_node(g, ids[0], ids[1], 0.5),
            &[rows(&a), rows(&p)],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-5, "{}", err);
    }
}

#[test]
fn loss_gradient_at_training_temperature() {
    // τ = 0.05 amplifies curvature; a finite-difference oracle on the pure loop form.
    for seed in 0..10 {
        let a = random_rows(3, 6, seed);
        let p = random_rows(3, 6, seed + 100);
        let rows = |ts: &[Tensor]| Tensor::from_rows(&ts.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let an = g.param(rows(&a));
        let pn = g.constant(rows(&p));
        let loss = info_nce_node(&mut g, an, pn, 0.05).unwrap();
        let grad = g.backward(loss).unwrap().get(an).unwrap().clone();
        let numeric = finite_difference_gradient(
            |x| {
                let anchors = (0..3).map(|i| x.slice0(i, 1).unwrap().reshape(&[6]).unwrap()).collect();
                info_nce_loss(&ContrastiveBatch::new(anchors, p.clone()).unwrap(), 0.05).unwrap()
            },
            &rows(&a),
            1e-6,
        );
        assert!(relative_error(&grad, &numeric) < 1e-5);
    }
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.learning_rate, d.temperature, d.eval_every), (3e-3, 0.05, 125));
}

#[test]
fn model_config_validation() {
    let mut cfg = small_config(FusionVariant::TwoD, Pooling::Avg);
    assert!(cfg.validate().is_ok());
    cfg.selector.n_blocks = 4;
    assert!(SentenceModel::init(cfg, 0).is_err());
}

#[test]
fn variants_share_encoder_init() {
    let a = SentenceModel::init(small_config(FusionVariant::Avg, Pooling::Avg), 3).unwrap();
    let b = SentenceModel::init(small_config(FusionVariant::TwoD, Pooling::First), 3).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.fusion.parameter_count(), 0);
    assert_eq!(b.fusion.parameter_count(), 16 * 4 + 2 * 4 * 16);
}

#[test]
fn first_token_pooling_prepends_classifier_id() {
    let m = SentenceModel::init(small_config(FusionVariant::TwoD, Pooling::First), 0).unwrap();
    let s = m.prepare("a b c d e f g h i j k l").unwrap();
    assert_eq!(s.ids()[0], crate::encoder::CLS_ID);
    assert_eq!(s.len(), 10);
    let m = SentenceModel::init(small_config(FusionVariant::TwoD, Pooling::Avg), 0).unwrap();
    assert_eq!(m.prepare("a b c").unwrap().len(), 3);
}

#[test]
fn embeddings_match_unbatched_pipeline() {
    // Inference embeddings equal encode → fuse → pool applied one sentence at a time.
    use crate::encoder::{pool_avg, pool_first};
    use crate::selector::ss_forward_2d;
    for pooling in [Pooling::Avg, Pooling::First] {
        let m = SentenceModel::init(small_config(FusionVariant::TwoD, pooling), 4).unwrap();
        let seqs = toy_corpus(&m, 5);
        let emb = m.embed(&seqs).unwrap();
        for (s, e) in seqs.iter().zip(&emb) {
            let blocks = m.encoder.encode(s, Dropout::Off).unwrap();
            let plan = m.fusion.plan_for(s.len()).unwrap();
            let fused = ss_forward_2d(&blocks[1..], m.fusion.selector.as_ref().unwrap(), &plan).unwrap().v;
            let want = match pooling {
                Pooling::Avg => pool_avg(&fused, s.len()).unwrap(),
                Pooling::First => pool_first(&fused).unwrap(),
            };
            assert!(relative_error(e, &want) < 1e-12);
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut m = SentenceModel::init(small_config(FusionVariant::TwoD, Pooling::Avg), 1).unwrap();
    let before = m.clone();
    let seqs = toy_corpus(&m, 8);
    let batch: Vec<&TokenSequence> = seqs.iter().collect();
    let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
    let loss = train_step(&mut m, &batch, &cfg, 0).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(m, before);
    assert!(train_step(&mut m, &[], &cfg, 0).is_err());
}

#[test]
fn step_loss_replays_through_loop_loss() {
    // Without dropout the two passes agree, so the step loss must equal the loop-form
    // loss evaluated on captured inference embeddings.
    let mut cfg = small_config(FusionVariant::TwoD, Pooling::Avg);
    cfg.encoder.dropout_rate = 0.0;
    let mut m = SentenceModel::init(cfg, 2).unwrap();
    let seqs = toy_corpus(&m, 6);
    let emb = m.embed(&seqs).unwrap();
    let batch = ContrastiveBatch::new(emb.clone(), emb).unwrap();
    let want = info_nce_loss(&batch, 0.05).unwrap();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let tc = TrainConfig { learning_rate: 0.0, ..Default::default() };
    let got = train_step(&mut m, &refs, &tc, 0).unwrap();
    assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn sgd_moves_every_trainable_tensor() {
    let mut m = SentenceModel::init(small_config(FusionVariant::TwoD, Pooling::Avg), 5).unwrap();
    let before = m.clone();
    let seqs = toy_corpus(&m, 8);
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    train_step(&mut m, &refs, &TrainConfig::default(), 0).unwrap();
    for (a, b) in m.tensors().iter().zip(before.tensors()).skip(1) {
        // Attention key biases receive an exactly-zero gradient only up to rounding.
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        encoder: EncoderConfig { vocab_size: 16, depth: 2, d: 8, heads: 2, ffn_mult: 2, dropout_rate: 0.1, max_len: 3 },
        selector: SelectorConfig { variant: FusionVariant::TwoD, n_blocks: 2, m: 2, r: 2, bottleneck: Bottleneck::Relu },
        pooling: Pooling::Avg,
    };
    let m = SentenceModel::init(cfg, 9).unwrap();
    let s = [TokenSequence::new(vec![3, 4, 5], 16).unwrap(), TokenSequence::new(vec![6, 7, 3], 16).unwrap()];
    let refs: Vec<&TokenSequence> = s.iter().collect();
    let inputs: Vec<Tensor> = m.tensors().into_iter().cloned().collect();
    let err = check_graph_gradients(
        |g, ids| {
            let bound = m.bind_ids(ids)?;
            contrastive_loss_node(&m, g, &bound, &refs, 11, 0.05)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batches_are_seeded_and_distinct() {
    let cfg = TrainConfig { batch_size: 8, seed: 3, ..Default::default() };
    let a = sample_batch(32, &cfg, 0);
    assert_eq!(a, sample_batch(32, &cfg, 0));
    assert_ne!(a, sample_batch(32, &cfg, 1));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 8);
    assert_eq!(sample_batch(5, &cfg, 0).len(), 5);
}

fn run(seed: u64, steps: usize) -> (TrainHistory, String) {
    let mut m = SentenceModel::init(small_config(FusionVariant::TwoD, Pooling::Avg), seed).unwrap();
    let seqs = toy_corpus(&m, 32);
    let cfg = TrainConfig { batch_size: 8, steps, eval_every: 50, seed, learning_rate: 0.05, ..Default::default() };
    let mut log = Vec::new();
    let mut evals = 0;
    let h = train(&mut m, &seqs, &cfg, &mut |_| { evals += 1; Ok(evals as f64) }, Some(&mut log)).unwrap();
    (h, String::from_utf8(log).unwrap())
}

#[test]
fn training_is_bit_deterministic_and_logs_intervals() {
    let (a, log) = run(7, 60);
    let (b, _) = run(7, 60);
    assert_eq!(
        a.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    let (c, _) = run(8, 60);
    assert_ne!(a.losses, c.losses);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step\tloss\tdev_spearman");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("50\t") && lines[2].starts_with("60\t"));
    assert_eq!(a.log.len(), 2);
}

#[test]
fn loss_trends_down_on_toy_corpus() {
    let (h, _) = run(1, 200);
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let windows: Vec<f64> = h.losses.chunks(50).map(avg).collect();
    // Frozen from the first run at this seed: the last window sat near 0.4× the first.
    assert!(windows[3] < 0.6 * windows[0], "{windows:?}");
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "{windows:?}");
    }
    let n = h.losses.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_l = avg(&h.losses);
    let slope: f64 = h.losses.iter().enumerate().map(|(t, l)| (t as f64 - mean_t) * (l - mean_l)).sum::<f64>()
        / h.losses.iter().enumerate().map(|(t, _)| (t as f64 - mean_t).powi(2)).sum::<f64>();
    assert!(slope < 0.0);
}
