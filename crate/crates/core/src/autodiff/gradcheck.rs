use super::graph::{Graph, NodeId};
use crate::error::{invalid, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Worst disagreement between analytic and finite-difference gradients for one leaf.
#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: NodeId,
    pub name: Option<String>,
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences `(f(x+ε) - f(x-ε)) / 2ε`, coordinate by coordinate, for every
/// `requires_grad` leaf.
///
/// Existing gradients are cleared; on return the graph holds the analytic
/// gradients of a single backward pass and its original leaf values.
pub fn grad_check(graph: &mut Graph, output: NodeId, epsilon: f64) -> Result<Vec<LeafCheck>> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(invalid(format!("grad_check epsilon {epsilon} outside (0, 1e-2]")));
    }
    graph.zero_grad();
    graph.backward(output)?;
    let mut report = Vec::new();
    for leaf in graph.grad_leaves() {
        let analytic = graph.grad_tensor(leaf).into_data();
        let original = graph.value(leaf).data().to_vec();
        let mut numeric = vec![0.0; original.len()];
        let mut probe = original.clone();
        for j in 0..original.len() {
            probe[j] = original[j] + epsilon;
            graph.set_leaf_value(leaf, &probe);
            graph.recompute()?;
            let plus = graph.value(output).item()?;
            probe[j] = original[j] - epsilon;
            graph.set_leaf_value(leaf, &probe);
            graph.recompute()?;
            let minus = graph.value(output).item()?;
            probe[j] = original[j];
            numeric[j] = (plus - minus) / (2.0 * epsilon);
        }
        graph.set_leaf_value(leaf, &original);
        graph.recompute()?;
        let max_rel_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .fold(0.0, f64::max);
        report.push(LeafCheck {
            leaf,
            name: graph.name_of(leaf).map(str::to_string),
            max_rel_error,
            analytic,
            numeric,
        });
    }
    Ok(report)
}

/// Largest error over all leaves of a [`grad_check`] report.
pub fn max_error(report: &[LeafCheck]) -> f64 {
    report.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}
