use serde::{Deserialize, Serialize};

use super::tensor::Tensor;

/// A trainable tensor with its gradient accumulator. Equality and
/// serialization see only the value; the accumulator is scratch space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    #[serde(skip, default = "empty_grad")]
    pub grad: Tensor,
}

fn empty_grad() -> Tensor {
    Tensor::vector(vec![0.0])
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Tensor::zeros(self.value.shape());
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn accumulate(&mut self, g: &[f64]) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Tensor::zeros(self.value.shape());
        }
        for (a, b) in self.grad.values_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient
/// (`v ← μv + g + λθ`, `θ ← θ − ηv`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad_ok = p.grad.shape() == p.value.shape();
            let (vals, grads) = (p.value.values_mut(), if grad_ok { Some(p.grad.values()) } else { None });
            for i in 0..vals.len() {
                let g = grads.map_or(0.0, |g| g[i]) + self.weight_decay * vals[i];
                v[i] = self.momentum * v[i] + g;
                vals[i] -= lr * v[i];
            }
        }
    }
}
