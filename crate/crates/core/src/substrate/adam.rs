use super::params::{Gradients, ParameterSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Every parameter must have a gradient; nothing is modified otherwise.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Config(format!(
            "gradient set has {} slots for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, p) in params.iter() {
        match grads.get(id) {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if !g.same_shape(&p.value) => {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient for `{}`", p.name),
                ))
            }
            Some(_) => {}
        }
    }

    let t = params.step() + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        let g = grads.get(super::params::ParamId(i)).expect("checked above");
        let values = p.value.values_mut();
        let m = p.m.values_mut();
        let v = p.v.values_mut();
        for k in 0..values.len() {
            let gk = g.values()[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            values[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    params.set_step(t);
    Ok(())
}
