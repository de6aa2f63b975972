//! SGD and the one-cycle learning-rate schedule.

use std::f64::consts::PI;

use super::tape::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// One-cycle shape: linear warm-up from `lr_max / div` to `lr_max` over the
/// first `warmup` fraction of steps, then cosine annealing down to
/// `lr_max / final_div` at the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub lr_max: f64,
    pub div: f64,
    pub final_div: f64,
    pub warmup: f64,
}

impl OneCycle {
    pub fn new(lr_max: f64) -> Self {
        Self { lr_max, div: 25.0, final_div: 2500.0, warmup: 0.3 }
    }

    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step >= total_steps {
            return Err(Error::domain(format!(
                "step {step} outside schedule of {total_steps} steps"
            )));
        }
        let start = self.lr_max / self.div;
        let end = self.lr_max / self.final_div;
        if total_steps == 1 {
            return Ok(start);
        }
        let peak = ((self.warmup * total_steps as f64).round() as usize).min(total_steps - 1);
        let s = step as f64;
        if step <= peak {
            if peak == 0 {
                return Ok(self.lr_max);
            }
            Ok(start + (self.lr_max - start) * s / peak as f64)
        } else {
            let frac = (s - peak as f64) / (total_steps - 1 - peak) as f64;
            Ok(end + (self.lr_max - end) * 0.5 * (1.0 + (PI * frac).cos()))
        }
    }
}

pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    OneCycle::new(lr_max).lr(step, total_steps)
}

/// SGD with optional heavy-ball momentum (`momentum = 0` is plain SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        Self { momentum, velocity: params.zeros_like() }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("velocity buffers do not match parameters"));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// `p <- p - lr * (g + momentum * v)` style update; consumes `grads`
    /// (left zeroed).
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("one gradient per parameter required"));
        }
        for ((p, g), v) in params.values_mut().zip(grads.iter_mut()).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape("gradient shape differs from parameter"));
            }
            if self.momentum == 0.0 {
                for (x, d) in p.data.iter_mut().zip(&g.data) {
                    *x -= lr * d;
                }
            } else {
                for ((x, d), vel) in p.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                    *vel = self.momentum * *vel + d;
                    *x -= lr * *vel;
                }
            }
            g.data.iter_mut().for_each(|d| *d = 0.0);
        }
        Ok(())
    }
}

/// Plain SGD update `p <- p - lr * grad`; grads are cleared.
pub fn sgd_step(params: &mut ParamStore, grads: &mut [Tensor], lr: f64) -> Result<()> {
    Sgd::new(params, 0.0).step(params, grads, lr)
}
