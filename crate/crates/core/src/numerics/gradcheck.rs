//! Finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::Graph;

/// Worst relative error per parameter, plus the overall maximum.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Runs forward + backward, then compares every parameter gradient
/// entry against a central finite difference of the loss.
pub fn gradient_check(graph: &mut Graph, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain(format!(
            "gradient check step {eps} outside (0, 1e-2]"
        )));
    }
    graph.forward()?;
    graph.backward()?;
    finite_difference_errors(graph, eps)
}

/// Compares the gradients currently stored in the graph against
/// central finite differences. Assumes forward and backward have
/// already run; exposed separately so tests can corrupt a gradient
/// buffer and confirm the comparison flags it.
pub fn finite_difference_errors(graph: &mut Graph, eps: f64) -> Result<GradCheckReport> {
    let params: Vec<_> = graph.params().to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for (name, id) in &params {
        let analytic = graph.grad(*id).clone();
        let n_entries = analytic.data().len();
        let mut worst: f64 = 0.0;
        for entry in 0..n_entries {
            let original = graph.value(*id).data()[entry];
            graph.value_mut(*id).data_mut()[entry] = original + eps;
            graph.forward()?;
            let plus = graph.loss_value()?;
            graph.value_mut(*id).data_mut()[entry] = original - eps;
            graph.forward()?;
            let minus = graph.loss_value()?;
            graph.value_mut(*id).data_mut()[entry] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[entry];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        per_param.push((name.clone(), worst));
    }
    // Restore values for any node downstream of the last perturbation.
    graph.forward()?;
    Ok(GradCheckReport {
        max_relative_error: overall,
        per_param,
    })
}
