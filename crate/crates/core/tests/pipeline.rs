use s2sent_core::encoder::{tokenize, Dropout, Encoder, EncoderConfig};
use s2sent_core::numerics::rng;
use s2sent_core::selector::{stack_blocks, ss_forward_2d, Bottleneck, SelectorParams};
use s2sent_core::spectral::select_low_frequencies;
use s2sent_core::training::{train, ModelConfig, SentenceModel, TrainConfig};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 256,
        depth: 3,
        d: 16,
        heads: 2,
        ffn_mult: 2,
        dropout_rate: 0.1,
        max_len: 16,
    }
}

fn tiny_model(seed: u64) -> SentenceModel {
    let mut config = ModelConfig { encoder: tiny_encoder(), ..Default::default() };
    config.selector.n_blocks = 2;
    config.selector.m = 2;
    config.selector.r = 4;
    SentenceModel::init(config, seed).unwrap()
}

const TEXTS: [&str; 6] = [
    "the river bends past the old mill",
    "a quiet morning over the harbour",
    "children race along the narrow lane",
    "rain drums softly on the tin roof",
    "the market opens before sunrise",
    "lanterns glow across the bay",
];

#[test]
fn encoder_blocks_fuse_to_a_convex_combination() {
    let cfg = tiny_encoder();
    let enc = Encoder::init(cfg, &mut rng::stream(4, &[1])).unwrap();
    let seq = tokenize(TEXTS[0], cfg.vocab_size).unwrap().with_cls();
    let blocks = enc.encode(&seq, Dropout::Off).unwrap();
    assert_eq!(blocks.len(), cfg.depth);
    let last = &blocks[1..];
    let (n, l, d) = stack_blocks(last).unwrap().dims();
    let plan = select_low_frequencies(n, l, 2).unwrap();
    let params = SelectorParams::init(d, 4, n, Bottleneck::Relu, &mut rng::stream(4, &[2])).unwrap();
    let fused = ss_forward_2d(last, &params, &plan).unwrap();
    let w = fused.weights.data();
    assert_eq!(w.len(), n * d);
    for j in 0..d {
        let col: f64 = (0..n).map(|i| w[i * d + j]).sum();
        assert!((col - 1.0).abs() < 1e-12, "feature {j} weights sum to {col}");
    }
    for t in 0..l {
        for j in 0..d {
            let expect: f64 = (0..n).map(|i| w[i * d + j] * last[i].at(&[t, j])).sum();
            assert!((fused.v.at(&[t, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_embedding_matches_single_sentences() {
    let model = tiny_model(9);
    let batch = model.embed_texts(&TEXTS).unwrap();
    for (text, emb) in TEXTS.iter().zip(&batch) {
        let alone = &model.embed_texts(&[text]).unwrap()[0];
        for (a, b) in alone.data().iter().zip(emb.data()) {
            assert!((a - b).abs() < 1e-12, "{text}: {a} vs {b}");
        }
    }
}

#[test]
fn short_training_run_then_checkpoint_roundtrip() {
    let mut model = tiny_model(2);
    let before = model.clone();
    let sentences: Vec<_> = TEXTS.iter().map(|t| model.prepare(t).unwrap()).collect();
    let cfg = TrainConfig { batch_size: 4, steps: 6, eval_every: 3, learning_rate: 1e-2, ..Default::default() };
    let mut evals = 0;
    let history = train(&mut model, &sentences, &cfg, &mut |_| { evals += 1; Ok(0.0) }, None).unwrap();
    assert_eq!(history.losses.len(), 6);
    assert!(history.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert_eq!(evals, 2);
    assert_ne!(model, before);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.ckpt");
    model.save(&path).unwrap();
    let loaded = SentenceModel::load(model.config, &path).unwrap();
    assert_eq!(loaded, model);
    let a = model.embed_texts(&TEXTS).unwrap();
    let b = loaded.embed_texts(&TEXTS).unwrap();
    assert_eq!(a, b);
}
