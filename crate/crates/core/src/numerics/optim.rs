use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers and step counter for [`adamw_step`].
#[derive(Debug, Clone)]
pub struct OptimState<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction. Returns the
/// updated parameters as fresh trainable leaves, in input order.
pub fn adamw_step<T: Real>(
    params: &[(String, Tensor<T>)],
    grads: &[Vec<T>],
    state: &mut OptimState<T>,
) -> Result<Vec<Tensor<T>>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adamw: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if g.len() != p.numel() {
            return Err(Error::Shape(format!(
                "adamw: gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let bc1 = T::lit(1.0 - c.beta1.powi(t));
    let bc2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr, eps, wd) = (T::lit(c.lr), T::lit(c.eps), T::lit(c.weight_decay));

    let mut out = Vec::with_capacity(params.len());
    for (i, ((_, p), g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut theta = p.to_vec();
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            theta[j] = theta[j] - lr * (update + wd * theta[j]);
        }
        out.push(Tensor::parameter(theta, p.shape())?);
    }
    Ok(out)
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}
