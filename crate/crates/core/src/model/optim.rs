use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Parameter update rule. `step` touches only `range` of the flat vectors.
pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grads: &[f64], range: Range<usize>, lr: f64);
    fn reset(&mut self);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Heavy-ball SGD with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, len: usize) -> Self {
        Self {
            config,
            velocity: vec![0.0; len],
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grads: &[f64], range: Range<usize>, lr: f64) {
        let SgdConfig { momentum, weight_decay } = self.config;
        for i in range {
            let g = grads[i] + weight_decay * params[i];
            let v = momentum * self.velocity[i] + g;
            self.velocity[i] = v;
            params[i] -= lr * v;
        }
    }

    fn reset(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// Cosine decay from `base` at epoch 0 towards `base * floor` at `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize, floor: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch as f64 / total as f64).min(1.0);
    let min = base * floor;
    min + 0.5 * (base - min) * (1.0 + (PI * t).cos())
}
