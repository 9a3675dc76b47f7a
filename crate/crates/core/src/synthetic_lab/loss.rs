use super::{dot, PreferencePair};

/// Linear scorer `s(x) = theta . x` trained against a frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub theta: Vec<f64>,
    pub theta_ref: Vec<f64>,
}

impl ToyModel {
    pub fn at_reference(theta_ref: Vec<f64>) -> Self {
        Self {
            theta: theta_ref.clone(),
            theta_ref,
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over the batch of `-log sigmoid(beta * [(s - s_ref)(x_w) - (s - s_ref)(x_l)])`
/// and its gradient with respect to `theta`. An empty batch has zero loss.
pub fn dpo_style_loss(model: &ToyModel, batch: &[&PreferencePair], beta: f64) -> (f64, Vec<f64>) {
    let d = model.theta.len();
    let mut grad = vec![0.0; d];
    if batch.is_empty() {
        return (0.0, grad);
    }
    let shift: Vec<f64> = model
        .theta
        .iter()
        .zip(&model.theta_ref)
        .map(|(t, r)| t - r)
        .collect();
    let mut diff = vec![0.0; d];
    let mut loss = 0.0;
    for pair in batch {
        for ((g, w), l) in diff.iter_mut().zip(&pair.winner).zip(&pair.loser) {
            *g = w - l;
        }
        let z = beta * dot(&shift, &diff);
        loss += softplus(-z);
        let coef = -beta * sigmoid(-z);
        for (g, x) in grad.iter_mut().zip(&diff) {
            *g += coef * x;
        }
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}
