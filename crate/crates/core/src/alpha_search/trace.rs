use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{snap_alpha, CandidatePoint, Objective, SearchAbort, SearchConfig, SearchError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Optimal { alpha: f64, score: f64 },
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub alpha: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, f64>,
    /// Highest score recorded up to and including this point.
    pub best_so_far: f64,
    /// True when the score was taken from a resumed trace rather than the
    /// evaluator.
    #[serde(default)]
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub config: SearchConfig,
    pub baseline: Option<f64>,
    pub points: Vec<TracePoint>,
    /// Number of recorded points, baseline included.
    pub evaluations: usize,
    /// Number of those points that invoked the evaluator.
    pub evaluator_calls: usize,
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SearchTrace {
    pub fn new(config: SearchConfig) -> Self {
        Self {
            config,
            baseline: None,
            points: Vec::new(),
            evaluations: 0,
            evaluator_calls: 0,
            outcome: None,
            error: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self, SearchError> {
        let bad = |reason: String| SearchError::Trace {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), SearchError> {
        let bad = |e: std::io::Error| SearchError::Trace {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut text = serde_json::to_string_pretty(self).expect("trace serializes");
        text.push('\n');
        let mut tmp = path.as_os_str().to_os_string();
        tmp.push(".tmp");
        fs::write(&tmp, text).map_err(bad)?;
        fs::rename(&tmp, path).map_err(bad)
    }

    pub fn point(&self, alpha: f64) -> Option<&TracePoint> {
        let alpha = snap_alpha(alpha);
        self.points.iter().find(|p| p.alpha == alpha)
    }

    /// Best non-baseline point (ties to the smaller alpha) and whether it
    /// beats `baseline + threshold`.
    pub fn decide(&self) -> Outcome {
        let Some(baseline) = self.baseline else {
            return Outcome::NoImprovement;
        };
        let best =
            self.points
                .iter()
                .filter(|p| p.alpha != 0.0)
                .fold(None::<&TracePoint>, |best, p| match best {
                    Some(b) if b.score > p.score || (b.score == p.score && b.alpha < p.alpha) => {
                        Some(b)
                    }
                    _ => Some(p),
                });
        match best {
            Some(p) if p.score > baseline + self.config.threshold => Outcome::Optimal {
                alpha: p.alpha,
                score: p.score,
            },
            _ => Outcome::NoImprovement,
        }
    }
}

/// Evaluates points through an [`Objective`], appending them to a trace that
/// is rewritten to disk after every point when a path is set.
pub struct TraceRecorder<'a> {
    objective: &'a dyn Objective,
    trace: SearchTrace,
    path: Option<PathBuf>,
    resume: HashMap<u64, CandidatePoint>,
    budget: Option<usize>,
}

impl<'a> TraceRecorder<'a> {
    pub fn new(objective: &'a dyn Objective, config: SearchConfig) -> Self {
        Self {
            objective,
            budget: config.budget(),
            trace: SearchTrace::new(config),
            path: None,
            resume: HashMap::new(),
        }
    }

    pub fn persist_to(mut self, path: impl Into<PathBuf>) -> Self {
        self.path = Some(path.into());
        self
    }

    /// Reuses scores from an earlier trace instead of calling the evaluator.
    pub fn resume_from(mut self, prior: &SearchTrace) -> Self {
        for p in &prior.points {
            self.resume.insert(
                snap_alpha(p.alpha).to_bits(),
                CandidatePoint {
                    alpha: p.alpha,
                    score: p.score,
                    candidate: p.candidate.clone(),
                    aux: p.aux.clone(),
                },
            );
        }
        self
    }

    pub fn trace(&self) -> &SearchTrace {
        &self.trace
    }

    pub fn baseline(&self) -> Option<f64> {
        self.trace.baseline
    }

    pub fn exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.trace.evaluations >= b)
    }

    /// Score at `alpha`, evaluating it if it has not been recorded yet.
    /// Returns `None` once the evaluation budget is spent.
    pub fn score(&mut self, alpha: f64) -> Result<Option<f64>, SearchError> {
        let alpha = snap_alpha(alpha);
        if let Some(p) = self.trace.point(alpha) {
            return Ok(Some(p.score));
        }
        if self.exhausted() {
            return Ok(None);
        }
        let (point, cached) = match self.resume.get(&alpha.to_bits()) {
            Some(p) => (p.clone(), true),
            None => (self.objective.evaluate(alpha)?, false),
        };
        let score = point.score;
        self.record(alpha, point, cached)?;
        Ok(Some(score))
    }

    /// Evaluates `alphas` in order, running up to `jobs` evaluator calls at a
    /// time. Stops at the budget. On error, points before the failing one (in
    /// list order) are kept.
    pub fn score_all(&mut self, alphas: &[f64], jobs: usize) -> Result<(), SearchError> {
        let mut todo: Vec<f64> = Vec::new();
        for &a in alphas {
            let a = snap_alpha(a);
            if self.trace.point(a).is_none() && !todo.contains(&a) {
                todo.push(a);
            }
        }
        let jobs = jobs.max(1);
        for chunk in todo.chunks(jobs) {
            let room = match self.budget {
                Some(b) => b.saturating_sub(self.trace.evaluations),
                None => usize::MAX,
            };
            if room == 0 {
                break;
            }
            let chunk = &chunk[..chunk.len().min(room)];
            let objective = self.objective;
            let resume = &self.resume;
            let eval = |&a: &f64| match resume.get(&a.to_bits()) {
                Some(p) => Ok((p.clone(), true)),
                None => objective.evaluate(a).map(|p| (p, false)),
            };
            let results: Vec<Result<(CandidatePoint, bool), SearchError>> = if jobs == 1 {
                chunk.iter().map(eval).collect()
            } else {
                chunk.par_iter().map(eval).collect()
            };
            for (&a, result) in chunk.iter().zip(results) {
                let (point, cached) = result?;
                self.record(a, point, cached)?;
            }
        }
        Ok(())
    }

    fn record(
        &mut self,
        alpha: f64,
        point: CandidatePoint,
        cached: bool,
    ) -> Result<(), SearchError> {
        if !point.score.is_finite() {
            return Err(SearchError::evaluator(
                alpha,
                format!("score {} is not finite", point.score),
            ));
        }
        let best_so_far = self
            .trace
            .points
            .last()
            .map_or(point.score, |p| p.best_so_far.max(point.score));
        if alpha == 0.0 {
            self.trace.baseline = Some(point.score);
        }
        self.trace.points.push(TracePoint {
            alpha,
            score: point.score,
            candidate: point.candidate,
            aux: point.aux,
            best_so_far,
            cached,
        });
        self.trace.evaluations += 1;
        if !cached {
            self.trace.evaluator_calls += 1;
        }
        self.save()
    }

    fn save(&self) -> Result<(), SearchError> {
        match &self.path {
            Some(path) => self.trace.write(path),
            None => Ok(()),
        }
    }

    pub fn finish(mut self) -> Result<SearchTrace, SearchAbort> {
        self.trace.outcome = Some(self.trace.decide());
        match self.save() {
            Ok(()) => Ok(self.trace),
            Err(error) => Err(SearchAbort {
                trace: Box::new(self.trace),
                error,
            }),
        }
    }

    pub fn abort(mut self, error: SearchError) -> SearchAbort {
        self.trace.error = Some(error.to_string());
        // The original error matters more than a failure to persist it.
        let _ = self.save();
        SearchAbort {
            trace: Box::new(self.trace),
            error,
        }
    }
}
