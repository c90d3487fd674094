use super::params::{Gradients, ParamId, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences over every parameter entry.
///
/// `loss_fn` must be deterministic in `params` and return the loss together
/// with its gradient.
pub fn grad_check<F>(params: &ParameterSet, epsilon: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for id in params.ids() {
        let n = params.value(id).len();
        for k in 0..n {
            let numeric = central_difference(&mut probe, id, k, epsilon, &loss_fn)?;
            let a = analytic.get(id).map_or(0.0, |g| g.values()[k]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

fn central_difference<F>(
    probe: &mut ParameterSet,
    id: ParamId,
    k: usize,
    eps: f64,
    loss_fn: &F,
) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)>,
{
    let orig = probe.value(id).values()[k];
    probe.value_mut(id).values_mut()[k] = orig + eps;
    let (plus, _) = loss_fn(probe)?;
    probe.value_mut(id).values_mut()[k] = orig - eps;
    let (minus, _) = loss_fn(probe)?;
    probe.value_mut(id).values_mut()[k] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite("grad_check perturbed loss".into()));
    }
    Ok((plus - minus) / (2.0 * eps))
}
