//! SGD with momentum, Adam, and the polynomial learning-rate schedule.

use super::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `v ← μ·v + g + wd·p; p ← p − lr·v`
    SgdMomentum {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum, weight_decay }
    }

    pub fn adam(beta1: f64, beta2: f64) -> Self {
        OptimizerKind::Adam { beta1, beta2, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter buffers. SGD keeps one (velocity); Adam keeps two (first and
/// second moments). Buffers are created lazily on the first update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    pub buffers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, buffers: Vec::new() }
    }

    fn prepare(&mut self, params: &[&mut Tensor<T>], grads: &[&Tensor<T>], per_param: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("parameter {i} has shape {:?}, gradient {:?}", p.shape(), g.shape())));
            }
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| (0..per_param).map(|_| Tensor::zeros(p.shape())).collect()).collect();
        } else if self.buffers.len() != params.len()
            || self.buffers.iter().zip(params).any(|(b, p)| b.iter().any(|t| t.shape() != p.shape()))
        {
            return Err(Error::shape("optimizer buffers do not match parameters"));
        }
        Ok(())
    }

    /// Dispatch on `kind`.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::SgdMomentum { .. } => sgd_update(params, grads, self, lr),
            OptimizerKind::Adam { .. } => adam_update(params, grads, self, lr),
        }
    }
}

pub fn sgd_update<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let OptimizerKind::SgdMomentum { momentum, weight_decay } = state.kind else {
        return Err(Error::invalid("sgd_update needs an SGD optimizer state"));
    };
    state.prepare(params, grads, 1)?;
    let (mu, wd, lr) = (T::lit(momentum), T::lit(weight_decay), T::lit(lr));
    for ((p, g), bufs) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        let v = bufs[0].data_mut();
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

pub fn adam_update<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let OptimizerKind::Adam { beta1, beta2, eps, weight_decay } = state.kind else {
        return Err(Error::invalid("adam_update needs an Adam optimizer state"));
    };
    state.prepare(params, grads, 2)?;
    let t = (state.step + 1) as i32;
    let bc1 = T::lit(1.0 - beta1.powi(t));
    let bc2 = T::lit(1.0 - beta2.powi(t));
    let (b1, b2, eps, wd, lr) = (T::lit(beta1), T::lit(beta2), T::lit(eps), T::lit(weight_decay), T::lit(lr));
    for ((p, g), bufs) in params.iter_mut().zip(grads).zip(&mut state.buffers) {
        let [m, v] = &mut bufs[..] else { unreachable!("adam keeps two buffers") };
        for (((pi, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
        {
            let gi = gi + wd * *pi;
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// `base_lr · (1 − iter/max_iter)^power`
pub fn poly_decay_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }
    if iter > max_iter {
        return Err(Error::invalid(format!("iter {iter} exceeds max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
