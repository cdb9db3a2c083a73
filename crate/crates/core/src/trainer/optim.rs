use std::f64::consts::PI;

use crate::backbone::EncoderParams;
use crate::error::{AclError, Result};

/// `lr0 · ½ (1 + cos(π · epoch / total))`, no warmup.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

/// One Nesterov step on flat slices:
/// `g' = g + wd·p; v = μ·v + g'; p -= lr·(g' + μ·v)`.
pub fn sgd_nesterov_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(AclError::shape(format!(
            "optimizer slices disagree: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
    Ok(())
}

/// SGD with Nesterov momentum and L2 weight decay over every encoder tensor.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: EncoderParams,
}

impl Sgd {
    pub fn new(params: &EncoderParams, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) -> Result<()> {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.velocity.tensors_mut())
        {
            if p.shape() != g.shape() {
                return Err(AclError::shape("gradient shape differs from parameter shape"));
            }
            sgd_nesterov_step(p.values_mut(), g.values(), v.values_mut(), lr, mu, wd)?;
        }
        Ok(())
    }
}
