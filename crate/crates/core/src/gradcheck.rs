//! Central finite-difference verification of [`Graph::backward`].

use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::{Result, TensorError};

/// Finite-difference step used by [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely rather than
/// relatively. Central differences at `h = 1e-5` carry roughly `1e-11`
/// absolute round-off for O(1) losses, so relative error is meaningless for
/// entries much smaller than this.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance,
            floor: DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_relative_error: f64,
    /// Parameter holding the worst element, reported when the check fails.
    pub offending: Option<NodeId>,
    /// Parameter and flat element index of the largest relative error.
    pub worst: Option<(NodeId, usize)>,
    pub checked: usize,
    /// Elements whose ±h window straddles a ReLU kink; the function is not
    /// differentiable there, so they are excluded from the comparison.
    pub skipped_kinks: usize,
}

/// Checks `backward()` against central differences for every parameter element.
pub fn grad_check(graph: &mut Graph, loss: NodeId, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = graph.backward(loss)?;
    compare_with_finite_differences(graph, loss, &analytic, GradCheckOptions::with_tolerance(tolerance))
}

/// Compares a supplied gradient map against central differences.
///
/// Leaves the graph with its original parameter values and recomputed
/// forward state.
pub fn compare_with_finite_differences(
    graph: &mut Graph,
    loss: NodeId,
    analytic: &Gradients,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        passed: true,
        max_relative_error: 0.0,
        offending: None,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    for param in graph.params() {
        let grad = analytic.get(param).ok_or_else(|| {
            TensorError::Contract(format!("no analytic gradient for {param}"))
        })?;
        let grad = grad.clone();
        for idx in 0..graph.value(param).len() {
            let original = graph.value(param).data()[idx];

            graph.value_mut_unchecked(param).data_mut()[idx] = original + opts.step;
            graph.recompute_from(param)?;
            let plus = graph.value(loss).item()?;
            let pattern_plus = relu_pattern(graph, param);

            graph.value_mut_unchecked(param).data_mut()[idx] = original - opts.step;
            graph.recompute_from(param)?;
            let minus = graph.value(loss).item()?;
            let pattern_minus = relu_pattern(graph, param);

            graph.value_mut_unchecked(param).data_mut()[idx] = original;

            if pattern_plus != pattern_minus {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst = Some((param, idx));
            }
        }
        graph.recompute_from(param)?;
    }
    report.passed = report.max_relative_error < opts.tolerance;
    if !report.passed {
        report.offending = report.worst.map(|(p, _)| p);
    }
    Ok(report)
}

/// Sign pattern of every ReLU input downstream of `from`.
fn relu_pattern(graph: &Graph, from: NodeId) -> Vec<bool> {
    let mut bits = Vec::new();
    for i in from.index() + 1..graph.len() {
        let id = crate::graph::node_id(i);
        if graph.op(id).is_relu() {
            bits.extend(graph.value(id).data().iter().map(|&v| v > 0.0));
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Padding;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, &[4, 3]));
        let w = g.param(random(&mut rng, &[3, 2]));
        let b = g.param(random(&mut rng, &[2]));
        let y = g.matmul(x, w).unwrap();
        let y = g.add_bias(y, b).unwrap();
        let sq = g.mul_elementwise(y, y).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let report = grad_check(&mut g, loss, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 8);
    }

    #[test]
    fn two_block_conv_composition_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, &[3, 1, 7]));
        let k1 = g.param(random(&mut rng, &[4, 1, 3]));
        let b1 = g.param(random(&mut rng, &[4]));
        let k2 = g.param(random(&mut rng, &[4, 4, 3]));
        let h = g.conv1d(x, k1, Padding::Same).unwrap();
        let h = g.add_channel_bias(h, b1).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.conv1d(h, k2, Padding::Valid).unwrap();
        let h = g.sigmoid(h).unwrap();
        let loss = g.mean_all(h).unwrap();
        let report = grad_check(&mut g, loss, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let mut g = Graph::new();
        let good = g.param(Tensor::vector(vec![0.4, -0.3]));
        let bad = g.param(Tensor::vector(vec![1.5, 0.7]));
        let a = g.mul_elementwise(good, good).unwrap();
        let b = g.broken_square(bad).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.mean_all(s).unwrap();
        let report = grad_check(&mut g, loss, 1e-4).unwrap();
        assert!(!report.passed);
        assert_eq!(report.offending, Some(bad));
        // parameter values are restored
        assert_eq!(g.value(bad).data(), &[1.5, 0.7]);
    }

    #[test]
    fn zero_parameter_graph_passes_vacuously() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.mul_elementwise(x, x).unwrap();
        let report = grad_check(&mut g, y, 1e-4).unwrap();
        assert!(report.passed);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn tampered_gradient_map_fails() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.2, 0.9]));
        let s = g.sigmoid(w).unwrap();
        let loss = g.mean_all(s).unwrap();
        let mut grads = g.backward(loss).unwrap();
        grads.get_mut(w).unwrap().data_mut()[1] += 1e-2;
        let report =
            compare_with_finite_differences(&mut g, loss, &grads, GradCheckOptions::with_tolerance(1e-4))
                .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst, Some((w, 1)));
    }
}
