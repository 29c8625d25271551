//! Dense tensors and a recorded reverse-mode differentiation graph.
//!
//! The op set is deliberately closed: element-wise arithmetic, matrix
//! products, embedding gathers, row softmax / log-softmax, layer norm,
//! causally masked attention over packed sequences, GELU, log / exp,
//! reductions, running means and dropout.

mod check;
mod gemm;
mod graph;
mod tensor;

pub use check::grad_check;
pub use graph::{Graph, NodeId, Segment, Segments};
pub use tensor::Tensor;

/// Row-wise softmax of a plain slice, used outside recorded graphs.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Builds the packed-row layout for sequences of the given lengths.
pub fn segments_for(lengths: impl IntoIterator<Item = usize>) -> Segments {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let seg = Segment { start, len };
            start += len;
            seg
        })
        .collect::<Vec<_>>()
        .into()
}
