use std::collections::HashMap;

use super::{Graph, GraphError, NodeId, Tensor};

/// Denominator floor of the relative error, per unit of loss magnitude.
/// Central differences at `epsilon = 1e-5` resolve gradients only to about
/// `1e-11·max(1, |loss|)`, so entries below the floor are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of `loss` with respect to the leaf `param`
/// against central differences.
///
/// Returns `max_j |analytic_j - fd_j| / max(|analytic_j|, |fd_j|, FD_FLOOR·max(1, |loss|))`.
pub fn finite_difference_check(
    graph: &Graph,
    inputs: &HashMap<NodeId, Tensor>,
    loss: NodeId,
    param: NodeId,
    epsilon: f64,
) -> Result<f64, GraphError> {
    if !(epsilon > 0.0) {
        return Err(GraphError::BadEpsilon(epsilon));
    }
    if param.index() >= graph.len() {
        return Err(GraphError::UnknownNode { node: param.index() });
    }
    let eval = graph.evaluate(inputs)?;
    let grads = graph.backpropagate(&eval, loss)?;
    let base = eval.value(param).clone();
    let zeros = Tensor::zeros(base.shape().to_vec());
    let analytic = grads.get(param).unwrap_or(&zeros);
    let floor = FD_FLOOR * eval.value(loss).item().abs().max(1.0);

    let mut probe = inputs.clone();
    let mut worst = 0.0_f64;
    for j in 0..base.len() {
        let mut plus = base.clone();
        plus.values_mut()[j] += epsilon;
        probe.insert(param, plus);
        let fp = graph.evaluate(&probe)?.value(loss).item();

        let mut minus = base.clone();
        minus.values_mut()[j] -= epsilon;
        probe.insert(param, minus);
        let fm = graph.evaluate(&probe)?.value(loss).item();

        let fd = (fp - fm) / (2.0 * epsilon);
        let a = analytic.values()[j];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
