use serde::{Deserialize, Serialize};

use super::{ParameterSet, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update using the gradients held in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::ParameterSetMismatch);
    }
    for (p, (m, v)) in params.iter().zip(state.m.iter().zip(&state.v)) {
        if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(TensorError::ParameterSetMismatch);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (p, (m, v)) in params.iter_mut().zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let grads = p.grad.data();
        for (((theta, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g.to_f64();
            let mn = cfg.beta1 * mi.to_f64() + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * vi.to_f64() + (1.0 - cfg.beta2) * g * g;
            *mi = T::from_f64(mn);
            *vi = T::from_f64(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *theta = T::from_f64(theta.to_f64() - update);
        }
    }
    Ok(())
}
