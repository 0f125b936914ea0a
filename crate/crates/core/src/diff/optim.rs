use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD or Adam over the trainable parameters of one [`ParamStore`].
///
/// A parameter tensor whose accumulated gradient is exactly zero is skipped
/// entirely (no moment update), which is how unused and frozen parameters stay
/// bit-identical across steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            steps: Vec::new(),
            step_count: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_count += 1;
        let n = store.len();
        if self.first.len() < n {
            for i in self.first.len()..n {
                let len = store.value_at(i).numel();
                self.first.push(vec![0.0; len]);
                self.second.push(vec![0.0; len]);
                self.steps.push(0);
            }
        }
        for i in 0..n {
            if !store.is_trainable(i) {
                continue;
            }
            let grad = store.grad_at(i).to_vec();
            if grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            let value = store.value_at_mut(i);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in value.data_mut().iter_mut().zip(&grad) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    self.steps[i] += 1;
                    let t = self.steps[i] as i32;
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (k, p) in value.data_mut().iter_mut().enumerate() {
                        let g = grad[k];
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
