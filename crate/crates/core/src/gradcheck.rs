//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Compares the analytic gradient of a scalar loss with respect to one
/// tensor against central differences.
///
/// `build` receives a fresh graph and the node holding `at`, and returns the
/// loss node. At most `max_coords` coordinates are probed, evenly strided.
/// Returns the maximum of `|a - c| / (|a| + |c| + 1e-12)`.
pub fn gradient_check<F>(build: F, at: &Tensor, eps: f64, max_coords: usize) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(t.clone());
        let loss = build(&mut g, x)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let x = g.param(at.clone());
    let loss = build(&mut g, x)?;
    let grads = g.backward(loss)?;
    let zero = Tensor::zeros(at.shape());
    let analytic = grads.get(x).unwrap_or(&zero);

    let n = at.len();
    let stride = n.div_ceil(max_coords.max(1)).max(1);
    let mut worst: f64 = 0.0;
    let mut probe = at.clone();
    for i in (0..n).step_by(stride) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let cd = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - cd).abs() / (a.abs() + cd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
