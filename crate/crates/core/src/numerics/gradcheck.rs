//! Central-difference gradient oracle.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate of `x`.
///
/// # Panics
/// If `step` is not strictly positive.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Relative disagreement between two gradient tensors, measured against the larger
/// of their max-norms: `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞)`.
///
/// Both gradients being identically zero counts as agreement.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Builds a scalar-valued graph over `inputs` (all trainable), differentiates it and
/// compares the gradients with central differences. The error is [`relative_error`]
/// over all inputs' gradients concatenated, so parameters whose exact gradient is zero
/// (e.g. attention key biases) are judged against the scale of the whole gradient.
pub fn check_graph_gradients<F>(build: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (g, ids, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (k, input) in inputs.iter().enumerate() {
        analytic.extend_from_slice(grads.get_or_zeros(ids[k], input.shape()).data());
        let fd = finite_difference_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = x.clone();
                let (g, _, out) = eval(&vals).expect("forward succeeded once");
                g.value(out).data()[0]
            },
            input,
            step,
        );
        numeric.extend_from_slice(fd.data());
    }
    let n = analytic.len();
    Ok(relative_error(
        &Tensor::new(vec![n], analytic)?,
        &Tensor::new(vec![n], numeric)?,
    ))
}
