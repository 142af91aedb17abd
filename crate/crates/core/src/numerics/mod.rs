//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod graph;
pub mod rng;
mod tensor;

pub use gradcheck::{check_graph_gradients, finite_difference_gradient, relative_error};
pub use graph::{sigmoid, Activation, Gradients, Graph, NodeId, Segment};
pub use tensor::Tensor;

/// Softmax of a whole tensor along `axis`, outside any graph.
pub fn softmax_over_axis(x: &Tensor, axis: usize) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let id = g.constant(x.clone());
    let out = g.softmax(id, axis)?;
    Ok(g.value(out).clone())
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

#[cfg(test)]
mod tests;
