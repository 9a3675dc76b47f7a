//! Search for the extrapolation strength `alpha` that maximizes a black-box
//! score.
//!
//! An [`Objective`] maps `alpha` to a [`CandidatePoint`]. Checkpoint-backed
//! objectives materialize `tuned + alpha * (tuned - base)` and hand it to an
//! evaluator; in-process objectives (the synthetic lab, tests) score `alpha`
//! directly. Every search evaluates the unextrapolated model (`alpha = 0`) as
//! its baseline and reports either the best improving `alpha` or
//! [`Outcome::NoImprovement`].

mod evaluator;
mod search;
mod trace;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_arith::ArithError;

pub use evaluator::{
    evaluate_candidate, shell_quote, BuiltinKind, CheckpointObjective, EvaluatorSpec,
    CANDIDATE_PLACEHOLDER,
};
pub use search::{
    adaptive_search, curve_csv, grid_points, grid_search, run_search, sweep, SearchConfig,
    Strategy, SweepRow,
};
pub use trace::{Outcome, SearchTrace, TracePoint, TraceRecorder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub alpha: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, f64>,
}

impl CandidatePoint {
    pub fn new(alpha: f64, score: f64) -> Self {
        Self {
            alpha,
            score,
            candidate: None,
            aux: BTreeMap::new(),
        }
    }

    pub fn with_aux(mut self, key: &str, value: f64) -> Self {
        self.aux.insert(key.to_string(), value);
        self
    }
}

/// Scores one extrapolation strength. Implementations must be deterministic
/// for traces to be reproducible.
pub trait Objective: Sync {
    fn evaluate(&self, alpha: f64) -> Result<CandidatePoint, SearchError>;
}

/// Adapts a closure `alpha -> score` into an [`Objective`].
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(f64) -> f64 + Sync,
{
    fn evaluate(&self, alpha: f64) -> Result<CandidatePoint, SearchError> {
        Ok(CandidatePoint::new(alpha, (self.0)(alpha)))
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("evaluator failed at alpha {alpha}: {message}")]
    Evaluator { alpha: f64, message: String },
    #[error(transparent)]
    Arith(#[from] ArithError),
    #[error("trace file {path}: {reason}")]
    Trace { path: PathBuf, reason: String },
}

impl SearchError {
    pub fn evaluator(alpha: f64, message: impl Into<String>) -> Self {
        SearchError::Evaluator {
            alpha,
            message: message.into(),
        }
    }
}

/// A failed search together with everything recorded before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct SearchAbort {
    pub trace: Box<SearchTrace>,
    #[source]
    pub error: SearchError,
}

/// Rounds to 1e-9 so that values produced by repeated halving or stepping
/// compare equal to their decimal spelling.
pub fn snap_alpha(alpha: f64) -> f64 {
    let s = (alpha * 1e9).round() / 1e9;
    if s == 0.0 {
        0.0
    } else {
        s
    }
}
