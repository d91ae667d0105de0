use serde::{Deserialize, Serialize};

use super::Parameterized;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    /// Zeroes the gradient, allocating it first for freshly deserialised params.
    pub fn zero_grad(&mut self) {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        } else {
            self.grad.fill(0.0);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut impl Parameterized, max_norm: f64) -> f64 {
    let mut params = model.params_mut();
    let norm = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            for g in &mut p.grad {
                *g *= s;
            }
        }
    }
    norm
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + (g + decay * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update with the accumulated gradients scaled by `grad_scale`.
    pub fn step(&mut self, model: &mut impl Parameterized, lr: f64, grad_scale: f64) {
        let params = model.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            for ((w, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + (g * grad_scale + self.weight_decay * *w);
                *w -= lr * *vel;
            }
        }
    }
}

/// Linear warm-up followed by step decay at the given iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: usize,
    /// Starting factor of the warm-up ramp.
    pub warmup_factor: f64,
    pub steps: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iter: usize) -> f64 {
        let decay = self.gamma.powi(self.steps.iter().filter(|&&s| iter >= s).count() as i32);
        let warm = if iter < self.warmup_iters {
            let a = iter as f64 / self.warmup_iters as f64;
            self.warmup_factor * (1.0 - a) + a
        } else {
            1.0
        };
        self.base_lr * decay * warm
    }
}
