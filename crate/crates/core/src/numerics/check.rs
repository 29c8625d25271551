use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central finite differences on
/// every parameter entry and returns the worst relative error
/// `|g_ad - g_fd| / max(|g_fd|, 1e-8)`.
pub fn grad_check(graph: &Graph, output: NodeId, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic = graph.backward(output)?;
    let upto = output.index() + 1;
    let eval_at = |id: NodeId, t: &Tensor| -> Result<f64> {
        let values = graph.replay(&[(id, t)], upto)?;
        Ok(values[output.index()].item())
    };

    let mut worst: f64 = 0.0;
    for (_, id) in graph.params().collect::<Vec<_>>() {
        let base = graph.value(id).clone();
        let grad = analytic.get(id.index()).and_then(|g| g.as_ref());
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[e] += step;
            let mut minus = base.clone();
            minus.data_mut()[e] -= step;
            let fd = (eval_at(id, &plus)? - eval_at(id, &minus)?) / (2.0 * step);
            let ad = grad.map_or(0.0, |g| g.data()[e]);
            let rel = (ad - fd).abs() / fd.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
