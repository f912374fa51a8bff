//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub t: u64,
    shape: Vec<usize>,
}

impl<R: Real> AdamState<R> {
    pub fn for_param(param: &Tensor<R>) -> Self {
        Self {
            m: vec![R::zero(); param.len()],
            v: vec![R::zero(); param.len()],
            t: 0,
            shape: param.shape().to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Applies one Adam update to `param` in place and advances `state.t`.
pub fn adam_step<R: Real>(
    param: &mut Tensor<R>,
    grad: &[R],
    state: &mut AdamState<R>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || state.shape != param.shape() {
        return Err(Error::ShapeMismatch(format!(
            "adam: param {:?}, grad len {}, state {:?}",
            param.shape(),
            grad.len(),
            state.shape
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = R::from_f64_lossy(cfg.beta1);
    let b2 = R::from_f64_lossy(cfg.beta2);
    let lr = R::from_f64_lossy(cfg.lr);
    let eps = R::from_f64_lossy(cfg.eps);
    let c1 = R::one() - b1.powi(t);
    let c2 = R::one() - b2.powi(t);
    let one = R::one();
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    if !param.all_finite() {
        return Err(Error::NonFinite("adam_step"));
    }
    Ok(())
}

/// Adam over an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub config: AdamConfig,
    states: Vec<AdamState<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<R>>) -> Self {
        Self { config, states: params.into_iter().map(AdamState::for_param).collect() }
    }

    pub fn states(&self) -> &[AdamState<R>] {
        &self.states
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<R>>,
        grads: &[Vec<R>],
    ) -> Result<()> {
        let mut n = 0;
        for ((p, g), s) in params.into_iter().zip(grads).zip(self.states.iter_mut()) {
            adam_step(p, g, s, &self.config)?;
            n += 1;
        }
        if n != self.states.len() || n != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} states, {} grads, {n} params",
                self.states.len(),
                grads.len()
            )));
        }
        Ok(())
    }
}
