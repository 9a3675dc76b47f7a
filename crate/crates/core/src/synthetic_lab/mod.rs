//! A small trainable analog of preference alignment.
//!
//! A [`LabWorld`] holds a hidden reward direction, a preference dataset
//! labeled by it (with some flipped labels), and evaluation pools of
//! candidate responses. A linear scorer `theta` is trained with a DPO-style
//! loss from an initial `theta0`; `omega(theta)` ([`true_reward`]) is the
//! expected true reward of the candidate the scorer would pick under a
//! softmax. Everything is seeded and bit-reproducible.

mod collapse;
mod experiments;
mod loss;
mod optim;
mod train;
mod world;

use thiserror::Error;

use crate::alpha_search::SearchError;

pub use collapse::detect_collapse;
pub use experiments::{
    directional_derivative, extrapolate_theta, interpolate_theta, interpolation_sweep, norm,
    run_bias_experiment, run_experiment, run_interpolation_experiment, run_optimizer_ablation,
    run_varying_steps_experiment, spearman, Curve, CurvePoint, Experiment, ExperimentReport,
    LabObjective, LabSettings, ReportRow, TrendCheck,
};
pub use loss::{dpo_style_loss, sigmoid, softplus, ToyModel};
pub use optim::{Optimizer, OptimizerState};
pub use train::{train, train_with_trajectory, DataOrder, TrainConfig, TrainResult};
pub use world::{make_world, make_world_with, true_reward, LabWorld, PreferencePair, WorldConfig};

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("invalid lab configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Search(#[from] SearchError),
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
