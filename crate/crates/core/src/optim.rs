//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        AdamState { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0, config }
    }
}

/// One Adam update of `param.value` from `param.grad`.
pub fn adam_step<T: Scalar>(param: &mut Param<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.shape() != param.value.shape() || param.grad.shape() != param.value.shape() {
        return Err(Error::Shape(format!(
            "adam state {:?} does not match parameter {} {:?}",
            state.m.shape(),
            param.name,
            param.value.shape()
        )));
    }
    state.t += 1;
    let c = state.config;
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::from_f64_lossy(c.lr);
    let eps = T::from_f64_lossy(c.eps);
    let g = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, w) in param.value.data_mut().iter_mut().enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over an ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, states: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>) -> Result<()> {
        if self.states.is_empty() {
            self.states = params.iter().map(|p| AdamState::new(p.value.shape(), self.config)).collect();
        }
        if self.states.len() != params.len() {
            return Err(Error::Shape("parameter list changed between optimizer steps".into()));
        }
        for (p, s) in params.into_iter().zip(&mut self.states) {
            adam_step(p, s)?;
        }
        Ok(())
    }
}
