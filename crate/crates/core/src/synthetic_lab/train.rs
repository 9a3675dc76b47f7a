use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    dpo_style_loss, LabError, LabWorld, Optimizer, OptimizerState, PreferencePair, ToyModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataOrder {
    /// A fresh permutation every pass over the data.
    Shuffled { seed: u64 },
    /// Pairs with the largest spurious-feature gap `x_w[s] - x_l[s]` first;
    /// ties keep dataset order.
    BiasSortedDescending,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub optimizer: Optimizer,
    pub order: DataOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 3e-3,
            beta: 0.5,
            optimizer: Optimizer::adamw(),
            order: DataOrder::Shuffled { seed: 0 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.batch_size == 0 {
            return Err(LabError::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::InvalidConfig(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub theta: Vec<f64>,
    /// `theta` after every step, starting with the initial value. Empty
    /// unless requested.
    pub trajectory: Vec<Vec<f64>>,
    pub state: OptimizerState,
}

/// Index order for one pass, produced lazily across passes.
struct Batches<'a> {
    world: &'a LabWorld,
    order: DataOrder,
    rng: Option<ChaCha8Rng>,
    current: Vec<usize>,
    cursor: usize,
}

impl<'a> Batches<'a> {
    fn new(world: &'a LabWorld, order: DataOrder) -> Self {
        let rng = match order {
            DataOrder::Shuffled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DataOrder::BiasSortedDescending => None,
        };
        let mut b = Self {
            world,
            order,
            rng,
            current: Vec::new(),
            cursor: 0,
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        let n = self.world.pairs.len();
        self.current = (0..n).collect();
        self.cursor = 0;
        match self.order {
            DataOrder::Shuffled { .. } => {
                let rng = self.rng.as_mut().expect("shuffled order has an rng");
                self.current.shuffle(rng);
            }
            DataOrder::BiasSortedDescending => {
                let s = self.world.spurious;
                let gap = |i: usize| {
                    let p = &self.world.pairs[i];
                    p.winner[s] - p.loser[s]
                };
                self.current.sort_by(|&a, &b| gap(b).total_cmp(&gap(a)));
            }
        }
    }

    fn next(&mut self, size: usize) -> Vec<&'a PreferencePair> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.current.len() {
                self.refill();
            }
            out.push(&self.world.pairs[self.current[self.cursor]]);
            self.cursor += 1;
        }
        out
    }
}

/// Trains `theta0` against itself as the reference. Deterministic in the
/// world and config.
pub fn train(
    world: &LabWorld,
    theta0: &[f64],
    config: &TrainConfig,
) -> Result<TrainResult, LabError> {
    train_inner(world, theta0, config, false)
}

/// [`train`] that also records `theta` after every step.
pub fn train_with_trajectory(
    world: &LabWorld,
    theta0: &[f64],
    config: &TrainConfig,
) -> Result<TrainResult, LabError> {
    train_inner(world, theta0, config, true)
}

fn train_inner(
    world: &LabWorld,
    theta0: &[f64],
    config: &TrainConfig,
    keep: bool,
) -> Result<TrainResult, LabError> {
    config.validate()?;
    let mut model = ToyModel::at_reference(theta0.to_vec());
    let mut state = OptimizerState::new(theta0.len());
    let mut trajectory = Vec::new();
    if keep {
        trajectory.push(model.theta.clone());
    }
    let mut batches = Batches::new(world, config.order);
    for step in 0..config.steps {
        let batch = batches.next(config.batch_size);
        let (_, grad) = dpo_style_loss(&model, &batch, config.beta);
        state.apply(&config.optimizer, config.lr, &mut model.theta, &grad);
        if model.theta.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Diverged { step });
        }
        if keep {
            trajectory.push(model.theta.clone());
        }
    }
    Ok(TrainResult {
        theta: model.theta,
        trajectory,
        state,
    })
}
