//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Per-parameter first/second moment accumulators plus the step counter.
/// Moments start at zero; `t` increases by exactly one per [`adam_step`].
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamState {
    /// Zero-moment state for one accumulator per parameter shape, in the
    /// same order parameters will be passed to [`adam_step`].
    pub fn new(shapes: &[(usize, usize)], config: AdamConfig) -> Self {
        AdamState {
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }
}

/// One Adam update over a fixed-order parameter list.
///
/// `params[i].0` is the parameter name, used only for diagnostics; `grads[i]`
/// must match the shape of `params[i].1`. A non-finite gradient aborts the
/// step with an error naming the parameter.
pub fn adam_step(
    params: &mut [(&str, &mut Matrix)],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::contract("learning rate must be positive"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(format!(
            "adam_step: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "adam_step: parameter {name} is {:?} but gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);

    for (i, ((_, p), g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..g.data().len() {
            let gv = g.data()[k];
            m.data_mut()[k] = state.beta1 * m.data()[k] + (1.0 - state.beta1) * gv;
            v.data_mut()[k] = state.beta2 * v.data()[k] + (1.0 - state.beta2) * gv * gv;
            let m_hat = m.data()[k] / bc1;
            let v_hat = v.data()[k] / bc2;
            p.data_mut()[k] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
