//! SGD with optional momentum and weight decay.
//!
//! Velocity buffers are keyed by parameter name so a single optimizer can
//! follow a network through snapshot/restore cycles; a missing gradient is
//! treated as zero.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ParamBinding, TinySegNet};

#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::contract(format!("momentum must lie in [0,1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::contract(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(Sgd { lr, momentum, weight_decay, velocity: HashMap::new() })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Drops all velocity buffers (fresh start after a parameter reset).
    pub fn reset_state(&mut self) {
        self.velocity.clear();
    }

    /// One update over the bound parameters, in binding order:
    /// g <- grad + wd * w;  v <- momentum * v + g;  w <- w - lr * v.
    pub fn step(&mut self, net: &mut TinySegNet, g: &Graph, bind: &ParamBinding) -> Result<()> {
        for (name, id) in bind.iter() {
            let grad = g.grad(id).map(|t| t.data().to_vec());
            let w = net.param_mut(name)?;
            let n = w.len();
            if let Some(ref gr) = grad {
                if gr.len() != n {
                    return Err(Error::shape(format!(
                        "gradient for {name} has {} elements, parameter has {n}",
                        gr.len()
                    )));
                }
            }
            let plain = self.momentum == 0.0 && self.weight_decay == 0.0;
            if plain {
                // Common adaptation path: keep the arithmetic to one fused
                // multiply-add per element so results are easy to reason about.
                if let Some(gr) = grad {
                    for (wi, gi) in w.data_mut().iter_mut().zip(gr) {
                        *wi -= self.lr * gi;
                    }
                }
                continue;
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0f32; n]);
            if v.len() != n {
                return Err(Error::shape(format!(
                    "velocity for {name} has {} elements, parameter has {n}",
                    v.len()
                )));
            }
            for i in 0..n {
                let gi = grad.as_ref().map_or(0.0, |gr| gr[i])
                    + self.weight_decay * w.data()[i];
                v[i] = self.momentum * v[i] + gi;
                w.data_mut()[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}

/// Polynomial decay: base * (1 - step/total)^power, the usual segmentation
/// training schedule. Clamps at zero progress past the end.
pub fn poly_lr(base: f32, step: usize, total_steps: usize, power: f32) -> f32 {
    if total_steps == 0 {
        return base;
    }
    let progress = (step as f32 / total_steps as f32).min(1.0);
    base * (1.0 - progress).powf(power)
}
