//! SGD with momentum and the step-halving learning-rate schedule.

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::network::{ParamKind, ParameterSet};

/// `lr0 * 2^-(floor(iteration / period))`.
pub fn lr_at(iteration: usize, lr0: f64, period: usize) -> f64 {
    let halvings = (iteration / period.max(1)).min(1074) as i32;
    lr0 * 2f64.powi(-halvings)
}

/// Momentum buffers, one per parameter tensor (empty for non-trainable ones).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let velocity = params
            .iter()
            .map(|p| if p.kind.trainable() { vec![T::zero(); p.value.numel()] } else { Vec::new() })
            .collect();
        Self { velocity }
    }
}

/// One update `v <- m v + (g + decay * theta)`, `theta <- theta - lr v`.
///
/// `decay` applies only to conv weights and should be zero when the decay
/// term is already part of the loss. Trainable tensors without a gradient
/// are treated as having a zero gradient.
pub fn sgd_step<T: Real>(
    params: &mut ParameterSet<T>,
    state: &mut OptimState<T>,
    lr: f64,
    momentum: f64,
    decay: f64,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer holds {} buffers for {} parameters",
            state.velocity.len(),
            params.len()
        )));
    }
    let (lr, m) = (T::lit(lr), T::lit(momentum));
    for (p, v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.kind.trainable() {
            continue;
        }
        let lam = if p.kind == ParamKind::ConvWeight { T::lit(decay) } else { T::zero() };
        let grad = p.grad.take();
        let theta = p.value.data_mut();
        if v.len() != theta.len() || grad.as_ref().is_some_and(|g| g.len() != theta.len()) {
            return Err(Error::Shape(format!("gradient/velocity size mismatch for {}", p.name)));
        }
        for i in 0..theta.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[i]) + lam * theta[i];
            v[i] = m * v[i] + g;
            theta[i] -= lr * v[i];
        }
    }
    Ok(())
}
