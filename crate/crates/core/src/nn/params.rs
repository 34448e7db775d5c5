use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A named block of parameters inside a flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All parameters of one network in a single flat buffer, so gradients,
/// optimizer state and checkpoints are plain vectors of the same length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub layout: Vec<ParamEntry>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn alloc(&mut self, name: &str, shape: &[usize]) -> usize {
        let offset = self.values.len();
        let entry = ParamEntry { name: name.to_string(), shape: shape.to_vec(), offset };
        self.values.resize(offset + entry.len(), 0.0);
        self.layout.push(entry);
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    /// He-style uniform init: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, scaled by `gain`.
    pub fn init_uniform(&mut self, offset: usize, len: usize, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        for v in &mut self.values[offset..offset + len] {
            *v = rng.gen_range(-bound..bound);
        }
    }

    pub fn fill(&mut self, offset: usize, len: usize, value: f64) {
        self.values[offset..offset + len].fill(value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Classical momentum: `v <- mu * v - lr * g; w <- w + v`.
    #[default]
    Sgd,
    /// Per-parameter steps: `G <- G + g^2; w <- w - lr * g / (sqrt(G) + eps)`.
    Adagrad,
}

const ADAGRAD_EPS: f64 = 1e-8;

/// First-order optimizer over a flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// Velocity for SGD, accumulated squared gradients for AdaGrad.
    pub state: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: usize, lr: f64, momentum: f64) -> Self {
        Optimizer { kind, lr, momentum, state: vec![0.0; params] }
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) {
        let it = weights.iter_mut().zip(&mut self.state).zip(grad);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((w, v), g) in it {
                    *v = self.momentum * *v - self.lr * g;
                    *w += *v;
                }
            }
            OptimizerKind::Adagrad => {
                for ((w, acc), g) in it {
                    *acc += g * g;
                    *w -= self.lr * g / (acc.sqrt() + ADAGRAD_EPS);
                }
            }
        }
    }
}

/// Scales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1, 0.1, 0.5);
        let mut w = [1.0];
        opt.step(&mut w, &[2.0]);
        assert!((w[0] - 0.8).abs() < 1e-15);
        opt.step(&mut w, &[2.0]);
        assert!((w[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adagrad_first_step_is_lr_times_sign() {
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, 2, 0.1, 0.0);
        let mut w = [0.0, 0.0];
        opt.step(&mut w, &[5.0, -0.01]);
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-4);
        opt.step(&mut w, &[5.0, 0.0]);
        assert!((w[0] + 0.1 + 0.1 / 2f64.sqrt()).abs() < 1e-6);
    }
}
