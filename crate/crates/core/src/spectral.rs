//! Frequency selection: spatial squeeze of a block×token×feature stack onto
//! low-frequency 2-D DCT basis functions.
//!
//! The squeeze uses the unnormalized basis
//! `α[n][l] = cos(πa(n+½)/N)·cos(πb(l+½)/L)`, so the `(0,0)` component is the plain
//! sum over the grid, i.e. `N·L` times global average pooling. The orthonormal
//! transform pair is only used by the round-trip oracle.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, LazyLock, RwLock};

use crate::error::{contract, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::selector::HiddenStack;

#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    pub n_blocks: usize,
    pub seq_len: usize,
    pub freq: (usize, usize),
    /// `[N×L]` basis values.
    pub values: Tensor,
}

type BasisKey = (usize, usize, usize, usize);

static BASIS_CACHE: LazyLock<RwLock<HashMap<BasisKey, Arc<DctBasis>>>> =
    LazyLock::new(Default::default);

/// Unnormalized 2-D DCT basis for frequency `(a, b)` on an `N×L` grid. Cached.
pub fn make_basis(n_blocks: usize, seq_len: usize, a: usize, b: usize) -> Result<Arc<DctBasis>> {
    if n_blocks == 0 || seq_len == 0 || a >= n_blocks || b >= seq_len {
        return contract(format!(
            "frequency ({a}, {b}) outside the {n_blocks}×{seq_len} grid"
        ));
    }
    let key = (n_blocks, seq_len, a, b);
    if let Some(hit) = BASIS_CACHE.read().expect("basis cache poisoned").get(&key) {
        return Ok(Arc::clone(hit));
    }
    let values = Tensor::from_fn(&[n_blocks, seq_len], |i| {
        let (n, l) = (i / seq_len, i % seq_len);
        cosine(a, n, n_blocks) * cosine(b, l, seq_len)
    });
    let basis = Arc::new(DctBasis {
        n_blocks,
        seq_len,
        freq: (a, b),
        values,
    });
    let mut cache = BASIS_CACHE.write().expect("basis cache poisoned");
    Ok(Arc::clone(cache.entry(key).or_insert(basis)))
}

/// Number of cached basis matrices.
pub fn basis_cache_len() -> usize {
    BASIS_CACHE.read().expect("basis cache poisoned").len()
}

fn cosine(freq: usize, pos: usize, len: usize) -> f64 {
    if freq == 0 {
        1.0
    } else {
        (PI * freq as f64 * (pos as f64 + 0.5) / len as f64).cos()
    }
}

/// Which basis function squeezes each of the `m` feature parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyPlan {
    pub n_blocks: usize,
    pub seq_len: usize,
    parts: usize,
    pairs: Vec<(usize, usize)>,
}

impl FrequencyPlan {
    /// Number of feature parts `m`.
    pub fn m(&self) -> usize {
        self.parts
    }

    /// Distinct frequency pairs, lowest first. Shorter than `m` only when clamped.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Frequency used for part `k`; parts past the last valid pair reuse it.
    pub fn pair_for_part(&self, k: usize) -> (usize, usize) {
        self.pairs[k.min(self.pairs.len() - 1)]
    }

    /// True when the grid had fewer than `m` frequencies.
    pub fn is_clamped(&self) -> bool {
        self.pairs.len() < self.parts
    }

    pub fn part_width(&self, d: usize) -> Result<usize> {
        if d % self.parts != 0 {
            return contract(format!(
                "embedding dimension {d} is not divisible into {} frequency parts",
                self.parts
            ));
        }
        Ok(d / self.parts)
    }
}

fn low_frequency_order(n_blocks: usize, seq_len: usize) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..n_blocks)
        .flat_map(|a| (0..seq_len).map(move |b| (a, b)))
        .collect();
    all.sort_by_key(|&(a, b)| (a + b, a));
    all
}

/// The `m` lowest frequencies of an `N×L` grid, ordered by `a+b` with ties going to
/// the smaller block frequency `a`.
pub fn select_low_frequencies(n_blocks: usize, seq_len: usize, m: usize) -> Result<FrequencyPlan> {
    if m == 0 || n_blocks == 0 || seq_len == 0 {
        return contract("frequency plan needs m ≥ 1 and a non-empty grid");
    }
    if m > n_blocks * seq_len {
        return contract(format!(
            "cannot select {m} frequencies from a {n_blocks}×{seq_len} grid"
        ));
    }
    let mut pairs = low_frequency_order(n_blocks, seq_len);
    pairs.truncate(m);
    Ok(FrequencyPlan {
        n_blocks,
        seq_len,
        parts: m,
        pairs,
    })
}

/// Like [`select_low_frequencies`], but a grid with fewer than `m` frequencies keeps
/// all of them and the trailing parts reuse the highest one.
pub fn select_low_frequencies_clamped(
    n_blocks: usize,
    seq_len: usize,
    m: usize,
) -> Result<FrequencyPlan> {
    let available = n_blocks * seq_len;
    let mut plan = select_low_frequencies(n_blocks, seq_len, m.min(available).max(1))?;
    plan.parts = m.max(1);
    Ok(plan)
}

/// Squeezed feature descriptor `f ∈ R^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct SqueezedFeatures(pub Tensor);

impl SqueezedFeatures {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// `[N·L × D]` weights: column `d` holds the basis of the part that owns feature `d`.
pub fn squeeze_weights(plan: &FrequencyPlan, d: usize) -> Result<Tensor> {
    let width = plan.part_width(d)?;
    let grid = plan.n_blocks * plan.seq_len;
    let bases = (0..plan.m())
        .map(|k| {
            let (a, b) = plan.pair_for_part(k);
            make_basis(plan.n_blocks, plan.seq_len, a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = Tensor::zeros(&[grid, d]);
    let data = w.data_mut();
    for p in 0..grid {
        for (k, basis) in bases.iter().enumerate() {
            let v = basis.values.data()[p];
            data[p * d + k * width..p * d + (k + 1) * width].fill(v);
        }
    }
    Ok(w)
}

fn check_plan(plan: &FrequencyPlan, shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || plan.n_blocks != shape[0] || plan.seq_len != shape[1] {
        return contract(format!(
            "frequency plan for a {}×{} grid applied to a stack of shape {shape:?}",
            plan.n_blocks, plan.seq_len
        ));
    }
    plan.part_width(shape[2]).map(|_| ())
}

/// Multi-spectral squeeze: part `k` of the features is projected onto the
/// basis `plan.pair_for_part(k)` and the parts are concatenated.
pub fn fs_squeeze(stack: &HiddenStack, plan: &FrequencyPlan) -> Result<SqueezedFeatures> {
    let mut g = Graph::new();
    let u = g.constant(stack.tensor().clone());
    let f = fs_squeeze_node(&mut g, u, plan)?;
    Ok(SqueezedFeatures(g.value(f).clone()))
}

/// Differentiable form of [`fs_squeeze`] over a `[N×L×D]` node. Returns a `[D]` node.
pub fn fs_squeeze_node(g: &mut Graph, stack: NodeId, plan: &FrequencyPlan) -> Result<NodeId> {
    let shape = g.value(stack).shape().to_vec();
    check_plan(plan, &shape)?;
    let (grid, d) = (shape[0] * shape[1], shape[2]);
    let flat = g.reshape(stack, &[grid, d])?;
    let weighted = g.mul_const(flat, squeeze_weights(plan, d)?)?;
    Ok(g.sum_rows(weighted))
}

/// Global average pooling over blocks and tokens.
pub fn gap_squeeze(stack: &HiddenStack) -> SqueezedFeatures {
    let (n, l, d) = stack.dims();
    let mut f = vec![0.0; d];
    for (i, v) in stack.tensor().data().iter().enumerate() {
        f[i % d] += v;
    }
    let scale = 1.0 / (n * l) as f64;
    SqueezedFeatures(Tensor::new(vec![d], f.into_iter().map(|v| v * scale).collect()).expect("d > 0"))
}

/// `[K×K]` orthonormal DCT-II matrix: row `k` is `c(k)·cos(πk(i+½)/K)`.
fn orthonormal_dct_matrix(k: usize) -> Tensor {
    Tensor::from_fn(&[k, k], |idx| {
        let (freq, pos) = (idx / k, idx % k);
        let c = if freq == 0 {
            (1.0 / k as f64).sqrt()
        } else {
            (2.0 / k as f64).sqrt()
        };
        c * cosine(freq, pos, k)
    })
}

/// Orthonormal 2-D DCT-II coefficients of an `[N×L]` matrix.
pub fn dct2_orthonormal(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(x)?;
    let a = orthonormal_dct_matrix(rows);
    let b = orthonormal_dct_matrix(cols);
    a.matmul(x)?.matmul(&b.transpose()?)
}

/// Inverse of [`dct2_orthonormal`] (2-D DCT-III).
pub fn idct2_orthonormal(coeffs: &Tensor) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(coeffs)?;
    let a = orthonormal_dct_matrix(rows);
    let b = orthonormal_dct_matrix(cols);
    a.transpose()?.matmul(coeffs)?.matmul(&b)
}

/// Forward orthonormal DCT followed by reconstruction.
pub fn dct_roundtrip_oracle(x: &Tensor) -> Result<Tensor> {
    idct2_orthonormal(&dct2_orthonormal(x)?)
}

fn matrix_dims(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return contract(format!("expected an N×L matrix, got shape {:?}", x.shape()));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_stack(n: usize, l: usize, d: usize, seed: u64) -> HiddenStack {
        let mut r = rng::stream(seed, &[]);
        HiddenStack::from_tensor(Tensor::from_fn(&[n, l, d], |_| r.gen_range(-2.0..2.0))).unwrap()
    }

    #[test]
    fn zero_frequency_basis_is_ones() {
        let b = make_basis(2, 2, 0, 0).unwrap();
        assert_eq!(b.values.data(), &[1.0; 4]);
    }

    #[test]
    fn basis_values_are_direct_cosines() {
        let b = make_basis(1, 2, 0, 1).unwrap();
        let (c1, c3) = ((PI / 4.0).cos(), (3.0 * PI / 4.0).cos());
        assert_eq!(b.values.data(), &[c1, c3]);
        assert!((b.values.data()[0] - 0.70711).abs() < 1e-5);
        assert!((b.values.data()[1] + 0.70711).abs() < 1e-5);
        let b = make_basis(2, 1, 1, 0).unwrap();
        assert_eq!(b.values.data(), &[c1, c3]);
        assert_eq!(b.values.shape(), &[2, 1]);
    }

    #[test]
    fn basis_rejects_out_of_range() {
        assert!(make_basis(2, 3, 2, 0).is_err());
        assert!(make_basis(2, 3, 0, 3).is_err());
        assert!(make_basis(0, 3, 0, 0).is_err());
    }

    #[test]
    fn basis_is_cached() {
        let a = make_basis(7, 11, 3, 5).unwrap();
        let before = basis_cache_len();
        let b = make_basis(7, 11, 3, 5).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert!(basis_cache_len() >= before);
    }

    #[test]
    fn low_frequency_examples() {
        assert_eq!(select_low_frequencies(3, 4, 1).unwrap().pairs(), &[(0, 0)]);
        assert_eq!(
            select_low_frequencies(3, 4, 4).unwrap().pairs(),
            &[(0, 0), (0, 1), (1, 0), (0, 2)]
        );
        assert_eq!(select_low_frequencies(1, 8, 2).unwrap().pairs(), &[(0, 0), (0, 1)]);
        assert!(select_low_frequencies(2, 2, 5).is_err());
        assert!(select_low_frequencies(2, 2, 0).is_err());
    }

    #[test]
    fn low_frequency_order_matches_enumeration() {
        // Brute force: walk diagonals a+b = s, a ascending.
        let (n, l) = (3, 5);
        let mut expected = Vec::new();
        for s in 0..n + l - 1 {
            for a in 0..n {
                if s >= a && s - a < l {
                    expected.push((a, s - a));
                }
            }
        }
        let plan = select_low_frequencies(n, l, n * l).unwrap();
        assert_eq!(plan.pairs(), expected.as_slice());
    }

    #[test]
    fn clamped_plan_reuses_last_pair() {
        let plan = select_low_frequencies_clamped(1, 2, 4).unwrap();
        assert!(plan.is_clamped());
        assert_eq!(plan.m(), 4);
        assert_eq!(plan.pairs(), &[(0, 0), (0, 1)]);
        assert_eq!(plan.pair_for_part(3), (0, 1));
        assert!(!select_low_frequencies_clamped(3, 4, 4).unwrap().is_clamped());
    }

    #[test]
    fn constant_stack_squeezes_to_grid_size() {
        let stack = HiddenStack::from_tensor(Tensor::ones(&[2, 3, 2])).unwrap();
        let f = fs_squeeze(&stack, &select_low_frequencies(2, 3, 1).unwrap()).unwrap();
        assert_eq!(f.as_tensor().data(), &[6.0, 6.0]);
        let f = fs_squeeze(&stack, &select_low_frequencies(2, 3, 2).unwrap()).unwrap();
        assert!((f.as_tensor().data()[0] - 6.0).abs() < 1e-12);
        assert!(f.as_tensor().data()[1].abs() < 1e-12);
    }

    #[test]
    fn squeeze_matches_nested_loop() {
        let stack = random_stack(2, 2, 4, 11);
        let plan = select_low_frequencies(2, 2, 4).unwrap();
        let f = fs_squeeze(&stack, &plan).unwrap();
        let u = stack.tensor();
        for d in 0..4 {
            let (a, b) = plan.pair_for_part(d);
            let mut acc = 0.0;
            for n in 0..2 {
                for l in 0..2 {
                    let alpha = (PI * a as f64 * (n as f64 + 0.5) / 2.0).cos()
                        * (PI * b as f64 * (l as f64 + 0.5) / 2.0).cos();
                    acc += u.at(&[n, l, d]) * alpha;
                }
            }
            assert!((f.as_tensor().data()[d] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn squeeze_rejects_bad_inputs() {
        let stack = random_stack(2, 3, 6, 1);
        assert!(fs_squeeze(&stack, &select_low_frequencies(2, 3, 4).unwrap()).is_err());
        assert!(fs_squeeze(&stack, &select_low_frequencies(2, 4, 2).unwrap()).is_err());
    }

    #[test]
    fn gap_examples() {
        let ones = HiddenStack::from_tensor(Tensor::ones(&[2, 3, 2])).unwrap();
        assert_eq!(gap_squeeze(&ones).as_tensor().data(), &[1.0, 1.0]);
        let s = HiddenStack::from_tensor(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(gap_squeeze(&s).as_tensor().data(), &[2.5]);
    }

    #[test]
    fn roundtrip_examples() {
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(dct_roundtrip_oracle(&z).unwrap().max_abs(), 0.0);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = dct_roundtrip_oracle(&x).unwrap();
        for (a, b) in r.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let c = dct2_orthonormal(&Tensor::full(&[3, 4], 2.5)).unwrap();
        assert!(c.data()[0].abs() > 1.0);
        assert!(c.data()[1..].iter().all(|v| v.abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn gap_equivalence(n in 1usize..=4, l in 1usize..=16, d in 1usize..=32, seed in any::<u64>()) {
            let stack = random_stack(n, l, d, seed);
            let f = fs_squeeze(&stack, &select_low_frequencies(n, l, 1).unwrap()).unwrap();
            let gap = gap_squeeze(&stack);
            for (x, y) in f.as_tensor().data().iter().zip(gap.as_tensor().data()) {
                prop_assert!((x - (n * l) as f64 * y).abs() < 1e-10);
            }
        }

        #[test]
        fn squeeze_is_linear(n in 1usize..=3, l in 1usize..=6, seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let m = (n * l).min(4);
            let d = 4 * m;
            let plan = select_low_frequencies(n, l, m).unwrap();
            let (u1, u2) = (random_stack(n, l, d, seed), random_stack(n, l, d, seed ^ 1));
            let mix = u1.tensor().zip_with(u2.tensor(), |a, b| alpha * a + beta * b).unwrap();
            let lhs = fs_squeeze(&HiddenStack::from_tensor(mix).unwrap(), &plan).unwrap();
            let (f1, f2) = (fs_squeeze(&u1, &plan).unwrap(), fs_squeeze(&u2, &plan).unwrap());
            for i in 0..d {
                let rhs = alpha * f1.as_tensor().data()[i] + beta * f2.as_tensor().data()[i];
                prop_assert!((lhs.as_tensor().data()[i] - rhs).abs() < 1e-10);
            }
        }

        #[test]
        fn nonzero_frequencies_ignore_constants(n in 1usize..=4, l in 1usize..=8, c in -5.0f64..5.0) {
            let m = n * l;
            let stack = HiddenStack::from_tensor(Tensor::full(&[n, l, m], c)).unwrap();
            let plan = select_low_frequencies(n, l, m).unwrap();
            let f = fs_squeeze(&stack, &plan).unwrap();
            for k in 1..m {
                prop_assert!(f.as_tensor().data()[k].abs() < 1e-10);
            }
        }

        #[test]
        fn roundtrip_and_parseval(n in 1usize..=6, l in 1usize..=12, seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let x = Tensor::from_fn(&[n, l], |_| r.gen_range(-5.0..5.0));
            let back = dct_roundtrip_oracle(&x).unwrap();
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let c = dct2_orthonormal(&x).unwrap();
            let e1: f64 = c.data().iter().map(|v| v * v).sum();
            let e2: f64 = x.data().iter().map(|v| v * v).sum();
            prop_assert!((e1 - e2).abs() < 1e-8);
        }

        #[test]
        fn plan_is_pure(n in 1usize..=4, l in 1usize..=8, m in 1usize..=4) {
            prop_assume!(m <= n * l);
            prop_assert_eq!(select_low_frequencies(n, l, m).unwrap(), select_low_frequencies(n, l, m).unwrap());
        }
    }
}
