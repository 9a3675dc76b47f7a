use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    snap_alpha, CandidatePoint, Objective, SearchAbort, SearchError, SearchTrace, TraceRecorder,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Every `lo + i * interval` up to `hi`.
    Grid { lo: f64, hi: f64, interval: f64 },
    /// Coarse probe, halving toward zero until something beats the
    /// baseline, then bracketing and bisecting around the best point.
    Adaptive {
        initial_interval: f64,
        min_interval: f64,
        max_evaluations: usize,
    },
}

fn default_min_probe() -> f64 {
    0.1
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub strategy: Strategy,
    /// A point must beat the baseline by more than this to count.
    #[serde(default)]
    pub threshold: f64,
    /// Smallest alpha the adaptive search will probe before giving up.
    #[serde(default = "default_min_probe")]
    pub min_probe: f64,
    /// Upper bound on concurrent evaluator calls during grid phases.
    #[serde(skip, default = "default_jobs")]
    pub jobs: usize,
}

impl SearchConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            threshold: 0.0,
            min_probe: default_min_probe(),
            jobs: 1,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_min_probe(mut self, min_probe: f64) -> Self {
        self.min_probe = min_probe;
        self
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn budget(&self) -> Option<usize> {
        match self.strategy {
            Strategy::Grid { .. } => None,
            Strategy::Adaptive {
                max_evaluations, ..
            } => Some(max_evaluations),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: String| Err(SearchError::InvalidConfig(m));
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return bad(format!("threshold must be >= 0, got {}", self.threshold));
        }
        match self.strategy {
            Strategy::Grid { lo, hi, interval } => {
                if !(lo.is_finite() && lo >= 0.0) {
                    return bad(format!("grid lower bound must be >= 0, got {lo}"));
                }
                if !(hi.is_finite() && hi >= lo) {
                    return bad(format!("grid upper bound {hi} is below lower bound {lo}"));
                }
                if !(interval.is_finite() && interval > 0.0) {
                    return bad(format!("grid interval must be > 0, got {interval}"));
                }
                if (hi - lo) / interval > 1e6 {
                    return bad("grid has more than a million points".into());
                }
            }
            Strategy::Adaptive {
                initial_interval,
                min_interval,
                max_evaluations,
            } => {
                if !(initial_interval.is_finite() && initial_interval > 0.0) {
                    return bad(format!(
                        "initial interval must be > 0, got {initial_interval}"
                    ));
                }
                if !(min_interval.is_finite() && min_interval > 0.0) {
                    return bad(format!("min interval must be > 0, got {min_interval}"));
                }
                if !(self.min_probe.is_finite() && self.min_probe > 0.0) {
                    return bad(format!("min probe must be > 0, got {}", self.min_probe));
                }
                if max_evaluations < 2 {
                    return bad("max evaluations must allow the baseline and one probe".into());
                }
            }
        }
        Ok(())
    }
}

/// `lo, lo + interval, ...` up to `hi` (inclusive, with 1e-9 slack).
pub fn grid_points(lo: f64, hi: f64, interval: f64) -> Vec<f64> {
    let n = ((hi - lo) / interval + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| snap_alpha(lo + i as f64 * interval))
        .collect()
}

/// Runs the strategy in the recorder's config.
pub fn run_search(mut recorder: TraceRecorder<'_>) -> Result<SearchTrace, SearchAbort> {
    let config = recorder.trace().config;
    if let Err(e) = config.validate() {
        return Err(recorder.abort(e));
    }
    let result = match config.strategy {
        Strategy::Grid { lo, hi, interval } => {
            let mut alphas = vec![0.0];
            alphas.extend(grid_points(lo, hi, interval));
            recorder.score_all(&alphas, config.jobs)
        }
        Strategy::Adaptive {
            initial_interval,
            min_interval,
            ..
        } => adaptive(&mut recorder, initial_interval, min_interval, &config),
    };
    match result {
        Ok(()) => recorder.finish(),
        Err(e) => Err(recorder.abort(e)),
    }
}

pub fn grid_search(
    objective: &dyn Objective,
    config: SearchConfig,
) -> Result<SearchTrace, SearchAbort> {
    run_search(TraceRecorder::new(objective, config))
}

pub fn adaptive_search(
    objective: &dyn Objective,
    config: SearchConfig,
) -> Result<SearchTrace, SearchAbort> {
    run_search(TraceRecorder::new(objective, config))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Runs until the bracket is narrower than `min_interval` on both sides of
/// the best point, or the budget runs out.
fn adaptive(
    rec: &mut TraceRecorder<'_>,
    initial: f64,
    min_interval: f64,
    config: &SearchConfig,
) -> Result<(), SearchError> {
    let Some(baseline) = rec.score(0.0)? else {
        return Ok(());
    };
    let target = baseline + config.threshold;
    let min_probe = snap_alpha(config.min_probe);

    // Halve toward zero until a probe beats the baseline. The failed probe
    // just above it becomes the right end of the bracket.
    let mut h = initial;
    let mut right = None;
    let (mut m, mut fm) = loop {
        let p = snap_alpha(h.max(min_probe));
        let Some(s) = rec.score(p)? else {
            return Ok(());
        };
        if s > target {
            break (p, s);
        }
        if p <= min_probe {
            return Ok(());
        }
        right = Some((p, s));
        h /= 2.0;
    };
    let mut left = (0.0, baseline);

    // The first probe already improved: walk right in steps of that size
    // until the score stops rising.
    let mut right = match right {
        Some(r) => r,
        None => {
            let step = m;
            loop {
                let q = snap_alpha(m + step);
                let Some(s) = rec.score(q)? else {
                    return Ok(());
                };
                if s > fm {
                    left = (m, fm);
                    (m, fm) = (q, s);
                } else {
                    break (q, s);
                }
            }
        }
    };

    let slack = 1e-9;
    loop {
        let left_open = m - left.0 > min_interval + slack;
        let right_open = right.0 - m > min_interval + slack;
        let sides: &[Side] = match (left_open, right_open) {
            (false, false) => return Ok(()),
            (true, false) => &[Side::Left],
            (false, true) => &[Side::Right],
            (true, true) if left.1 >= right.1 => &[Side::Left, Side::Right],
            (true, true) => &[Side::Right, Side::Left],
        };
        for &side in sides {
            let gap = match side {
                Side::Left => m - left.0,
                Side::Right => right.0 - m,
            };
            let d = (gap / 2.0).max(min_interval);
            let q = snap_alpha(match side {
                Side::Left => m - d,
                Side::Right => m + d,
            });
            let Some(s) = rec.score(q)? else {
                return Ok(());
            };
            if s > fm {
                match side {
                    Side::Left => right = (m, fm),
                    Side::Right => left = (m, fm),
                }
                (m, fm) = (q, s);
                break;
            }
            match side {
                Side::Left => left = (q, s),
                Side::Right => right = (q, s),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<std::path::PathBuf>,
    #[serde(skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub aux: std::collections::BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Evaluates the baseline and every listed alpha. A failing point is
/// recorded with its error and the sweep continues.
pub fn sweep(
    objective: &dyn Objective,
    alphas: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>, SearchError> {
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(SearchError::InvalidConfig(format!(
            "sweep alphas must be >= 0, got {a}"
        )));
    }
    let mut todo = vec![0.0];
    for &a in alphas {
        let a = snap_alpha(a);
        if !todo.contains(&a) {
            todo.push(a);
        }
    }
    let eval = |&a: &f64| -> SweepRow {
        match objective.evaluate(a) {
            Ok(CandidatePoint {
                score,
                candidate,
                aux,
                ..
            }) => SweepRow {
                alpha: a,
                score: Some(score),
                candidate,
                aux,
                error: None,
            },
            Err(e) => SweepRow {
                alpha: a,
                score: None,
                candidate: None,
                aux: Default::default(),
                error: Some(e.to_string()),
            },
        }
    };
    let jobs = jobs.max(1);
    let mut rows = Vec::with_capacity(todo.len());
    for chunk in todo.chunks(jobs) {
        if jobs == 1 {
            rows.extend(chunk.iter().map(eval));
        } else {
            rows.extend(chunk.par_iter().map(eval).collect::<Vec<_>>());
        }
    }
    Ok(rows)
}

/// `alpha,score,error` followed by one column per aux key (sorted).
pub fn curve_csv(rows: &[SweepRow]) -> String {
    let keys: BTreeSet<&String> = rows.iter().flat_map(|r| r.aux.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["alpha".to_string(), "score".into(), "error".into()];
    header.extend(keys.iter().map(|k| k.to_string()));
    w.write_record(&header).expect("in-memory csv write");
    for r in rows {
        let mut rec = vec![
            r.alpha.to_string(),
            r.score.map(|s| s.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ];
        rec.extend(
            keys.iter()
                .map(|k| r.aux.get(*k).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}
