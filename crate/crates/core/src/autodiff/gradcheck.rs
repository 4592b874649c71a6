use super::{Graph, NodeId, Parameterized};
use crate::error::{Error, Result};

/// Largest relative disagreement between the analytic gradient of `param` and
/// central differences, `|analytic - numeric| / (|numeric| + 1e-12)`.
///
/// `forward` rebuilds the scalar loss from a (perturbed) copy of `model`.
/// `entries` restricts the check to the given flat indices; `None` checks all.
pub fn finite_diff_check<M, F>(
    model: &M,
    forward: F,
    param: &str,
    eps: f64,
    entries: Option<&[usize]>,
) -> Result<f64>
where
    M: Parameterized + Clone,
    F: Fn(&M) -> Result<(Graph, NodeId)>,
{
    if eps <= 0.0 {
        return Err(Error::Gradient(format!("step {eps} must be positive")));
    }
    let (graph, loss) = forward(model)?;
    let grads = graph.backward(loss)?;
    let analytic = grads
        .get(param)
        .ok_or_else(|| Error::Gradient(format!("no gradient for {param}")))?;
    let all: Vec<usize> = (0..analytic.len()).collect();
    let entries = entries.unwrap_or(&all);

    let eval = |idx: usize, delta: f64| -> Result<f64> {
        let mut m = model.clone();
        m.visit_params_mut(&mut |name, t, _| {
            if name == param {
                t.data_mut()[idx] += delta;
            }
        });
        let (g, l) = forward(&m)?;
        Ok(g.value(l).item())
    };

    let mut worst = 0.0f64;
    for &idx in entries {
        let numeric = (eval(idx, eps)? - eval(idx, -eps)?) / (2.0 * eps);
        let err = (analytic.data()[idx] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
