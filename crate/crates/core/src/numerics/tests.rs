use proptest::prelude::*;
use rand::Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    Tensor::from_fn(shape, |_| r.gen_range(-2.0..2.0))
}

#[test]
fn activation_examples() {
    assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    assert_eq!(Activation::Relu.apply(-3.0), 0.0);
    assert_eq!(Activation::Relu.apply(3.0), 3.0);
    // tanh(0.5) = (e − 1)/(e + 1) with e = exp(1)
    let e = 1.0_f64.exp();
    let reference = (e - 1.0) / (e + 1.0);
    assert!((Activation::Tanh.apply(0.5) - reference).abs() < 1e-15);
    assert!((reference - 0.462_117_157_260_009_7).abs() < 1e-15);
}

#[test]
fn sigmoid_saturates_inside_open_interval() {
    for x in [-30.0, -5.0, 0.0, 5.0, 30.0] {
        let s = sigmoid(x);
        assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
    }
}

#[test]
fn softmax_examples() {
    let s = softmax_over_axis(&t(&[3], &[2.5, 2.5, 2.5]), 0).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax_over_axis(&t(&[2], &[1.0, 0.0]), 0).unwrap();
    let e = 1.0_f64.exp();
    assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((s.data()[0] - 0.73106).abs() < 1e-5);
    assert!((s.data()[1] - 0.26894).abs() < 1e-5);
    let s = softmax_over_axis(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
    assert!(s.is_finite());
    assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
}

#[test]
fn softmax_rejects_bad_axis() {
    assert!(softmax_over_axis(&Tensor::zeros(&[2, 2]), 2).is_err());
}

#[test]
fn softmax_middle_axis_lanes() {
    let x = random(&[2, 3, 4], 3);
    let s = softmax_over_axis(&x, 1).unwrap();
    for a in 0..2 {
        for c in 0..4 {
            let total: f64 = (0..3).map(|b| s.at(&[a, b, c])).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -1.0, 2.0]));
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn constants_get_no_gradient_unless_flagged() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones(&[2]));
    let flagged = g.leaf(Tensor::ones(&[2]), true);
    let s = g.mul(c, flagged).unwrap();
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(flagged).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn finite_difference_examples() {
    let x = random(&[4], 9);
    let g = finite_difference_gradient(|v| v.sum(), &x, 1e-5);
    for v in g.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let g = finite_difference_gradient(|v| v.data()[0] * v.data()[0], &Tensor::scalar(3.0), 1e-5);
    assert!((g.data()[0] - 6.0).abs() < 1e-8);
}

#[test]
#[should_panic]
fn finite_difference_needs_positive_step() {
    finite_difference_gradient(|v| v.sum(), &Tensor::scalar(1.0), 0.0);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(random(&[5, 4], 1));
        let b = g.param(random(&[4, 3], 2));
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let y = g.activation(s, Activation::Tanh);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Weighted sum with fixed pseudo-random weights so every output coordinate
/// contributes a distinct amount to the scalar.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> crate::Result<NodeId> {
    let w = random(g.value(x).shape(), seed ^ 0xABCD);
    let p = g.mul_const(x, w)?;
    Ok(g.sum(p))
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=8, 1usize..=8, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_gradients((p, q, s, seed) in dims()) {
        let err = check_graph_gradients(
            |g, ids| { let m = g.matmul(ids[0], ids[1])?; weighted_sum(g, m, seed) },
            &[random(&[p, q], seed), random(&[q, s], seed + 1)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn elementwise_gradients((p, q, _s, seed) in dims()) {
        let err = check_graph_gradients(
            |g, ids| {
                let a = g.mul(ids[0], ids[1])?;
                let b = g.add(a, ids[0])?;
                let c = g.scale(b, -0.7);
                let d = g.add_const(c, &Tensor::full(&[p, q], 0.25))?;
                weighted_sum(g, d, seed)
            },
            &[random(&[p, q], seed), random(&[p, q], seed + 1)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn activation_gradients((p, q, _s, seed) in dims(), kind in prop_oneof![
        Just(Activation::Relu), Just(Activation::Sigmoid), Just(Activation::Tanh), Just(Activation::Gelu)
    ]) {
        let err = check_graph_gradients(
            |g, ids| { let y = g.activation(ids[0], kind); weighted_sum(g, y, seed) },
            &[random(&[p, q], seed)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "{kind:?} err {err}");
    }

    #[test]
    fn softmax_gradients((p, q, s, seed) in dims(), axis in 0usize..3) {
        let err = check_graph_gradients(
            |g, ids| { let y = g.softmax(ids[0], axis)?; weighted_sum(g, y, seed) },
            &[random(&[p, q, s], seed)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn row_broadcast_and_reduction_gradients((p, q, _s, seed) in dims()) {
        let err = check_graph_gradients(
            |g, ids| {
                let a = g.add_row(ids[0], ids[1])?;
                let b = g.mul_row(a, ids[2])?;
                let c = g.sum_rows(b);
                let t = g.transpose(ids[0])?;
                let d = weighted_sum(g, t, seed + 7)?;
                let e = weighted_sum(g, c, seed)?;
                g.add(d, e)
            },
            &[random(&[p, q], seed), random(&[q], seed + 1), random(&[q], seed + 2)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn layer_norm_gradients((p, q, _s, seed) in dims()) {
        prop_assume!(q >= 2);
        let err = check_graph_gradients(
            |g, ids| { let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?; weighted_sum(g, y, seed) },
            &[random(&[p, q], seed), random(&[q], seed + 1), random(&[q], seed + 2)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn slicing_joining_gradients((p, q, _s, seed) in dims()) {
        let err = check_graph_gradients(
            |g, ids| {
                let head = g.slice0(ids[0], 0, 1)?;
                let tail = g.slice0(ids[0], p - 1, 1)?;
                let j = g.join(&[head, ids[1], tail], &[p + 2, q])?;
                let st = g.stack(&[ids[1], ids[1]])?;
                let r = g.reshape(st, &[2 * p * q])?;
                let a = weighted_sum(g, j, seed)?;
                let b = weighted_sum(g, r, seed + 3)?;
                g.add(a, b)
            },
            &[random(&[p, q], seed), random(&[p, q], seed + 1)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn embedding_gradients((v, d, n, seed) in dims()) {
        let mut r = rng::stream(seed, &[5]);
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
        let err = check_graph_gradients(
            |g, x| { let e = g.embed(x[0], &ids)?; weighted_sum(g, e, seed) },
            &[random(&[v, d], seed)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn normalize_and_cross_entropy_gradients((b, d, _s, seed) in dims()) {
        let targets: Vec<usize> = (0..b).collect();
        let err = check_graph_gradients(
            |g, ids| {
                let a = g.normalize_rows(ids[0])?;
                let p = g.normalize_rows(ids[1])?;
                let pt = g.transpose(p)?;
                let sim = g.matmul(a, pt)?;
                let logits = g.scale(sim, 3.0);
                g.cross_entropy(logits, &targets)
            },
            &[random(&[b, d], seed), random(&[b, d], seed + 1)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn attention_gradients(lens in proptest::collection::vec(1usize..=5, 1..=3), heads in 1usize..=2, seed in any::<u64>()) {
        let d = 4 * heads;
        let mut segments = Vec::new();
        let mut start = 0;
        for len in &lens {
            segments.push(Segment { start, len: *len });
            start += len;
        }
        let err = check_graph_gradients(
            |g, ids| { let y = g.attention(ids[0], ids[1], ids[2], &segments, heads)?; weighted_sum(g, y, seed) },
            &[random(&[start, d], seed), random(&[start, d], seed + 1), random(&[start, d], seed + 2)],
            STEP,
        ).unwrap();
        prop_assert!(err < TOL, "err {err}");
    }

    #[test]
    fn softmax_slices_sum_to_one((p, q, _s, seed) in dims()) {
        let x = random(&[p, q], seed).scale(10.0);
        let s = softmax_over_axis(&x, 1).unwrap();
        for r in 0..p {
            let total: f64 = s.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn sigmoid_is_antisymmetric(x in -50.0f64..50.0) {
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    let mut g = Graph::new();
    let q = g.constant(random(&[5, 4], 1));
    let k = g.constant(random(&[5, 4], 2));
    let v = g.constant(random(&[5, 4], 3));
    let out = g.attention(q, k, v, &segs, 2).unwrap();
    let probs = g.attention_probs(out).unwrap();
    assert_eq!(probs.len(), 2 * 9 + 2 * 4);
    let mut offset = 0;
    for seg in &segs {
        for _ in 0..2 {
            for i in 0..seg.len {
                let row = &probs[offset + i * seg.len..offset + (i + 1) * seg.len];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            offset += seg.len * seg.len;
        }
    }
}

#[test]
fn single_token_attention_copies_values() {
    let mut g = Graph::new();
    let q = g.constant(random(&[1, 4], 1));
    let k = g.constant(random(&[1, 4], 2));
    let v = g.constant(random(&[1, 4], 3));
    let out = g.attention(q, k, v, &[Segment { start: 0, len: 1 }], 2).unwrap();
    assert_eq!(g.value(out), g.value(v));
}
