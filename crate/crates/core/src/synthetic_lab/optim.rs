use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Adam with decoupled weight decay applied before the moment update.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    AdaGrad {
        eps: f64,
    },
    RmsProp {
        decay: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub const fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub const fn adagrad() -> Self {
        Optimizer::AdaGrad { eps: 1e-10 }
    }

    pub const fn rmsprop() -> Self {
        Optimizer::RmsProp {
            decay: 0.99,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::AdamW { .. } => "adamw",
            Optimizer::AdaGrad { .. } => "adagrad",
            Optimizer::RmsProp { .. } => "rmsprop",
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "adamw" => Some(Self::adamw()),
            "adagrad" => Some(Self::adagrad()),
            "rmsprop" => Some(Self::rmsprop()),
            _ => None,
        }
    }
}

/// Per-parameter accumulators. `m` is unused by AdaGrad and RMSprop; `v`
/// holds the squared-gradient sum or average.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(d: usize) -> Self {
        Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            step: 0,
        }
    }

    pub fn apply(&mut self, opt: &Optimizer, lr: f64, theta: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(theta.len(), grad.len());
        self.step += 1;
        match *opt {
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..theta.len() {
                    theta[i] -= lr * weight_decay * theta[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
            Optimizer::AdaGrad { eps } => {
                for i in 0..theta.len() {
                    self.v[i] += grad[i] * grad[i];
                    theta[i] -= lr * grad[i] / (self.v[i].sqrt() + eps);
                }
            }
            Optimizer::RmsProp { decay, eps } => {
                for i in 0..theta.len() {
                    self.v[i] = decay * self.v[i] + (1.0 - decay) * grad[i] * grad[i];
                    theta[i] -= lr * grad[i] / (self.v[i].sqrt() + eps);
                }
            }
        }
    }
}
