use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    detect_collapse, dot, make_world_with, train, true_reward, DataOrder, LabError, LabWorld,
    Optimizer, TrainConfig, WorldConfig,
};
use crate::alpha_search::{
    grid_points, run_search, CandidatePoint, Objective, Outcome, SearchConfig, SearchError,
    Strategy, TraceRecorder,
};

/// `theta1 + alpha * (theta1 - theta0)`.
pub fn extrapolate_theta(theta0: &[f64], theta1: &[f64], alpha: f64) -> Vec<f64> {
    theta0
        .iter()
        .zip(theta1)
        .map(|(&a, &b)| b + alpha * (b - a))
        .collect()
}

/// `(1 - gamma) * theta0 + gamma * theta1`, exact at both endpoints.
pub fn interpolate_theta(theta0: &[f64], theta1: &[f64], gamma: f64) -> Vec<f64> {
    theta0
        .iter()
        .zip(theta1)
        .map(|(&a, &b)| (1.0 - gamma) * a + gamma * b)
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `(gamma, omega)` along the segment from `theta0` to `theta1`.
pub fn interpolation_sweep(
    world: &LabWorld,
    theta0: &[f64],
    theta1: &[f64],
    gammas: &[f64],
) -> Result<Vec<(f64, f64)>, LabError> {
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(LabError::InvalidConfig(format!(
            "gamma {g} is outside [0, 1]"
        )));
    }
    Ok(gammas
        .iter()
        .map(|&g| (g, true_reward(world, &interpolate_theta(theta0, theta1, g))))
        .collect())
}

/// Central-difference estimate of the derivative of `omega` at `theta`
/// along `dir`.
pub fn directional_derivative(world: &LabWorld, theta: &[f64], dir: &[f64], h: f64) -> f64 {
    let up: Vec<f64> = theta.iter().zip(dir).map(|(t, d)| t + h * d).collect();
    let down: Vec<f64> = theta.iter().zip(dir).map(|(t, d)| t - h * d).collect();
    (true_reward(world, &up) - true_reward(world, &down)) / (2.0 * h)
}

/// Scores extrapolations of a trained lab model by `omega`.
pub struct LabObjective<'a> {
    pub world: &'a LabWorld,
    pub theta0: &'a [f64],
    pub theta1: &'a [f64],
}

impl Objective for LabObjective<'_> {
    fn evaluate(&self, alpha: f64) -> Result<CandidatePoint, SearchError> {
        let theta = extrapolate_theta(self.theta0, self.theta1, alpha);
        Ok(CandidatePoint::new(alpha, true_reward(self.world, &theta))
            .with_aux("theta_norm", norm(&theta))
            .with_aux("spurious", theta[self.world.spurious]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    VaryingSteps,
    Bias,
    Optimizers,
    Interpolation,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::VaryingSteps,
        Experiment::Bias,
        Experiment::Optimizers,
        Experiment::Interpolation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::VaryingSteps => "varying-steps",
            Experiment::Bias => "bias",
            Experiment::Optimizers => "optimizers",
            Experiment::Interpolation => "interpolation",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == name)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSettings {
    pub world: WorldConfig,
    /// `steps` is the full-length run; fractions scale it.
    pub train: TrainConfig,
    pub fractions: Vec<f64>,
    /// Fractions for the shuffled versus bias-sorted comparison. A full pass
    /// sees the same pairs in either order, so 100% is left out by default.
    pub bias_fractions: Vec<f64>,
    pub search: SearchConfig,
    pub optimizers: Vec<Optimizer>,
    pub ablation_fraction: f64,
    /// Alphas for the plot-ready extrapolation curves.
    pub curve_alphas: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Drop below the unextrapolated score that counts as collapse.
    pub collapse_margin: f64,
}

impl Default for LabSettings {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            fractions: vec![0.1, 0.2, 0.4, 1.0],
            bias_fractions: vec![0.1, 0.2, 0.4],
            search: SearchConfig::new(Strategy::Adaptive {
                initial_interval: 1.0,
                min_interval: 0.05,
                max_evaluations: 48,
            }),
            optimizers: vec![
                Optimizer::adamw(),
                Optimizer::adagrad(),
                Optimizer::rmsprop(),
            ],
            ablation_fraction: 0.2,
            curve_alphas: grid_points(0.0, 20.0, 0.25),
            gammas: grid_points(0.0, 1.0, 0.1),
            collapse_margin: 0.05,
        }
    }
}

impl LabSettings {
    pub fn validate(&self) -> Result<(), LabError> {
        self.world.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        let all = self
            .fractions
            .iter()
            .chain(&self.bias_fractions)
            .chain([&self.ablation_fraction]);
        for &f in all {
            if !(f > 0.0 && f <= 1.0) {
                return Err(LabError::InvalidConfig(format!(
                    "training fraction {f} is outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn steps_for(&self, fraction: f64) -> usize {
        (fraction * self.train.steps as f64).round() as usize
    }

    fn train_config(
        &self,
        seed: u64,
        fraction: f64,
        order: Order,
        optimizer: Optimizer,
    ) -> TrainConfig {
        TrainConfig {
            steps: self.steps_for(fraction),
            optimizer,
            order: match order {
                Order::Shuffled => DataOrder::Shuffled { seed },
                Order::BiasSorted => DataOrder::BiasSortedDescending,
            },
            ..self.train
        }
    }
}

#[derive(Clone, Copy)]
enum Order {
    Shuffled,
    BiasSorted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub condition: String,
    pub fraction: f64,
    pub steps: usize,
    pub trained_score: f64,
    pub optimal_alpha: Option<f64>,
    pub extrapolated_score: Option<f64>,
    /// `theta1[s]`, the weight on the spurious feature.
    pub spurious_exposure: f64,
    pub delta_norm: f64,
    pub collapse_alpha: Option<f64>,
}

impl ReportRow {
    pub fn is_optimal(&self) -> bool {
        self.optimal_alpha.is_some()
    }

    /// Chosen alpha, or 0 when extrapolation did not help.
    pub fn effective_alpha(&self) -> f64 {
        self.optimal_alpha.unwrap_or(0.0)
    }

    /// Score of the model the search would deploy.
    pub fn effective_score(&self) -> f64 {
        self.extrapolated_score.unwrap_or(self.trained_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub score: f64,
    pub theta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub seed: u64,
    pub label: String,
    /// `"alpha"` or `"gamma"`.
    pub axis: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub holds: usize,
    pub total: usize,
}

impl TrendCheck {
    pub fn majority(&self) -> bool {
        2 * self.holds > self.total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub settings: LabSettings,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub curves: Vec<Curve>,
    pub trends: Vec<TrendCheck>,
}

fn opt_csv(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ExperimentReport {
    /// Table layout: one row per (seed, condition).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "seed",
            "condition",
            "fraction",
            "steps",
            "trained_score",
            "optimal_alpha",
            "extrapolated_score",
            "outcome",
            "spurious_exposure",
            "delta_norm",
            "collapse_alpha",
        ])
        .expect("in-memory csv write");
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                r.condition.clone(),
                r.fraction.to_string(),
                r.steps.to_string(),
                r.trained_score.to_string(),
                opt_csv(r.optimal_alpha),
                opt_csv(r.extrapolated_score),
                if r.is_optimal() {
                    "optimal"
                } else {
                    "no_improvement"
                }
                .to_string(),
                r.spurious_exposure.to_string(),
                r.delta_norm.to_string(),
                opt_csv(r.collapse_alpha),
            ])
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    /// `seed,label,axis,x,score,theta_norm` for every curve point.
    pub fn curves_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "label", "axis", "x", "score", "theta_norm"])
            .expect("in-memory csv write");
        for c in &self.curves {
            for p in &c.points {
                w.write_record([
                    c.seed.to_string(),
                    c.label.clone(),
                    c.axis.clone(),
                    p.x.to_string(),
                    p.score.to_string(),
                    p.theta_norm.to_string(),
                ])
                .expect("in-memory csv write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    /// Settings, seeds and trend counts; rows and curves live in the CSVs.
    pub fn sidecar_json(&self) -> serde_json::Value {
        serde_json::json!({
            "experiment": self.experiment,
            "settings": self.settings,
            "seeds": self.seeds,
            "trends": self.trends.iter().map(|t| serde_json::json!({
                "name": t.name,
                "holds": t.holds,
                "total": t.total,
                "majority": t.majority(),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn trend(&self, name: &str) -> Option<&TrendCheck> {
        self.trends.iter().find(|t| t.name == name)
    }

    pub fn rows_for(&self, seed: u64) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.seed == seed)
    }
}

/// Trains one condition and searches its extrapolation strength.
fn trained_row(
    world: &LabWorld,
    settings: &LabSettings,
    condition: String,
    fraction: f64,
    order: Order,
    optimizer: Optimizer,
) -> Result<(ReportRow, Vec<f64>), LabError> {
    let cfg = settings.train_config(world.seed, fraction, order, optimizer);
    let theta1 = train(world, &world.theta0, &cfg)?.theta;
    let objective = LabObjective {
        world,
        theta0: &world.theta0,
        theta1: &theta1,
    };
    let trace = run_search(TraceRecorder::new(&objective, settings.search)).map_err(|a| a.error)?;
    let trained_score = trace.baseline.expect("search evaluates the baseline");
    let (optimal_alpha, extrapolated_score) = match trace.outcome {
        Some(Outcome::Optimal { alpha, score }) => (Some(alpha), Some(score)),
        _ => (None, None),
    };
    let delta: Vec<f64> = theta1
        .iter()
        .zip(&world.theta0)
        .map(|(a, b)| a - b)
        .collect();
    let row = ReportRow {
        seed: world.seed,
        condition,
        fraction,
        steps: cfg.steps,
        trained_score,
        optimal_alpha,
        extrapolated_score,
        spurious_exposure: theta1[world.spurious],
        delta_norm: norm(&delta),
        collapse_alpha: None,
    };
    Ok((row, theta1))
}

fn alpha_curve(world: &LabWorld, theta1: &[f64], label: String, alphas: &[f64]) -> Curve {
    let objective = LabObjective {
        world,
        theta0: &world.theta0,
        theta1,
    };
    let points = alphas
        .iter()
        .map(|&a| {
            let p = objective.evaluate(a).expect("lab objective is infallible");
            CurvePoint {
                x: a,
                score: p.score,
                theta_norm: p.aux["theta_norm"],
            }
        })
        .collect();
    Curve {
        seed: world.seed,
        label,
        axis: "alpha".into(),
        points,
    }
}

fn percent(f: f64) -> String {
    format!("{}%", snap_percent(f))
}

fn snap_percent(f: f64) -> f64 {
    (f * 1e6).round() / 1e4
}

/// Trains at each fraction of the full step budget and extrapolates each.
pub fn run_varying_steps_experiment(
    world: &LabWorld,
    settings: &LabSettings,
) -> Result<(Vec<ReportRow>, Vec<Curve>), LabError> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &f in &settings.fractions {
        let (mut row, theta1) = trained_row(
            world,
            settings,
            format!("steps-{}", percent(f)),
            f,
            Order::Shuffled,
            settings.train.optimizer,
        )?;
        let curve = alpha_curve(
            world,
            &theta1,
            row.condition.clone(),
            &settings.curve_alphas,
        );
        let points: Vec<CandidatePoint> = curve
            .points
            .iter()
            .map(|p| CandidatePoint::new(p.x, p.score))
            .collect();
        row.collapse_alpha = detect_collapse(&points, row.trained_score, settings.collapse_margin);
        rows.push(row);
        curves.push(curve);
    }
    Ok((rows, curves))
}

/// Shuffled versus bias-sorted training at each fraction.
pub fn run_bias_experiment(
    world: &LabWorld,
    settings: &LabSettings,
) -> Result<(Vec<ReportRow>, Vec<Curve>), LabError> {
    let mut rows = Vec::new();
    for &f in &settings.bias_fractions {
        for (name, order) in [
            ("shuffled", Order::Shuffled),
            ("bias-sorted", Order::BiasSorted),
        ] {
            let (row, _) = trained_row(
                world,
                settings,
                format!("{name}-{}", percent(f)),
                f,
                order,
                settings.train.optimizer,
            )?;
            rows.push(row);
        }
    }
    Ok((rows, Vec::new()))
}

/// Same steps and learning rate, different update rules.
pub fn run_optimizer_ablation(
    world: &LabWorld,
    settings: &LabSettings,
) -> Result<(Vec<ReportRow>, Vec<Curve>), LabError> {
    let mut rows = Vec::new();
    for &opt in &settings.optimizers {
        let (row, _) = trained_row(
            world,
            settings,
            opt.name().to_string(),
            settings.ablation_fraction,
            Order::Shuffled,
            opt,
        )?;
        rows.push(row);
    }
    Ok((rows, Vec::new()))
}

/// Interpolation curve from `theta0` to the fully trained model.
pub fn run_interpolation_experiment(
    world: &LabWorld,
    settings: &LabSettings,
) -> Result<(Vec<ReportRow>, Vec<Curve>), LabError> {
    let cfg = settings.train_config(world.seed, 1.0, Order::Shuffled, settings.train.optimizer);
    let theta1 = train(world, &world.theta0, &cfg)?.theta;
    let sweep = interpolation_sweep(world, &world.theta0, &theta1, &settings.gammas)?;
    let points = sweep
        .iter()
        .map(|&(g, score)| CurvePoint {
            x: g,
            score,
            theta_norm: norm(&interpolate_theta(&world.theta0, &theta1, g)),
        })
        .collect();
    let delta: Vec<f64> = theta1
        .iter()
        .zip(&world.theta0)
        .map(|(a, b)| a - b)
        .collect();
    let row = ReportRow {
        seed: world.seed,
        condition: "interpolation".into(),
        fraction: 1.0,
        steps: cfg.steps,
        trained_score: true_reward(world, &theta1),
        optimal_alpha: None,
        extrapolated_score: None,
        spurious_exposure: theta1[world.spurious],
        delta_norm: norm(&delta),
        collapse_alpha: None,
    };
    let curve = Curve {
        seed: world.seed,
        label: "interpolation".into(),
        axis: "gamma".into(),
        points,
    };
    Ok((vec![row], vec![curve]))
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

fn count(name: String, seeds: &[u64], holds: impl Fn(u64) -> bool) -> TrendCheck {
    TrendCheck {
        name,
        holds: seeds.iter().filter(|&&s| holds(s)).count(),
        total: seeds.len(),
    }
}

fn trends(
    experiment: Experiment,
    settings: &LabSettings,
    seeds: &[u64],
    rows: &[ReportRow],
    curves: &[Curve],
) -> Vec<TrendCheck> {
    let row = |seed: u64, condition: &str| {
        rows.iter()
            .find(|r| r.seed == seed && r.condition == condition)
    };
    let mut out = Vec::new();
    match experiment {
        Experiment::VaryingSteps => {
            let frs = &settings.fractions;
            if frs.contains(&0.2) && frs.contains(&1.0) {
                out.push(count(
                    "extrapolated 20% >= trained 100%".into(),
                    seeds,
                    |s| match (row(s, "steps-20%"), row(s, "steps-100%")) {
                        (Some(a), Some(b)) => a.effective_score() >= b.trained_score,
                        _ => false,
                    },
                ));
            }
            let mut sorted = frs.clone();
            sorted.sort_by(f64::total_cmp);
            out.push(count(
                "optimal alpha weakly decreasing in steps".into(),
                seeds,
                |s| {
                    let alphas: Vec<f64> = sorted
                        .iter()
                        .filter_map(|&f| row(s, &format!("steps-{}", percent(f))))
                        .map(ReportRow::effective_alpha)
                        .collect();
                    alphas.windows(2).all(|w| w[0] >= w[1])
                },
            ));
            out.push(count("collapse detected on curve".into(), seeds, |s| {
                rows.iter()
                    .any(|r| r.seed == s && r.collapse_alpha.is_some())
            }));
        }
        Experiment::Bias => {
            for &f in &settings.bias_fractions {
                let pair = |s: u64| {
                    row(s, &format!("shuffled-{}", percent(f)))
                        .zip(row(s, &format!("bias-sorted-{}", percent(f))))
                };
                out.push(count(
                    format!("bias-sorted alpha < shuffled alpha at {}", percent(f)),
                    seeds,
                    |s| pair(s).is_some_and(|(u, b)| b.effective_alpha() < u.effective_alpha()),
                ));
                out.push(count(
                    format!(
                        "bias-sorted extrapolated <= shuffled extrapolated at {}",
                        percent(f)
                    ),
                    seeds,
                    |s| pair(s).is_some_and(|(u, b)| b.effective_score() <= u.effective_score()),
                ));
                out.push(count(
                    format!("bias-sorted no improvement at {}", percent(f)),
                    seeds,
                    |s| pair(s).is_some_and(|(_, b)| !b.is_optimal()),
                ));
            }
        }
        Experiment::Optimizers => {
            let names: Vec<&str> = settings.optimizers.iter().map(Optimizer::name).collect();
            if names.contains(&"adagrad") && names.contains(&"adamw") {
                out.push(count(
                    "adagrad trained <= adamw trained".into(),
                    seeds,
                    |s| match (row(s, "adagrad"), row(s, "adamw")) {
                        (Some(a), Some(w)) => a.trained_score <= w.trained_score,
                        _ => false,
                    },
                ));
            }
        }
        Experiment::Interpolation => {
            out.push(count("spearman(gamma, omega) > 0.9".into(), seeds, |s| {
                curves.iter().find(|c| c.seed == s).is_some_and(|c| {
                    let x: Vec<f64> = c.points.iter().map(|p| p.x).collect();
                    let y: Vec<f64> = c.points.iter().map(|p| p.score).collect();
                    spearman(&x, &y).is_some_and(|r| r > 0.9)
                })
            }));
        }
    }
    out.push(count(
        "extrapolated > trained whenever optimal".into(),
        seeds,
        |s| {
            rows.iter()
                .filter(|r| r.seed == s)
                .all(|r| r.extrapolated_score.is_none_or(|e| e > r.trained_score))
        },
    ));
    out
}

/// Runs `experiment` for every seed (in parallel) and tallies the trends.
pub fn run_experiment(
    experiment: Experiment,
    seeds: &[u64],
    settings: &LabSettings,
) -> Result<ExperimentReport, LabError> {
    settings.validate()?;
    let per_seed: Vec<(Vec<ReportRow>, Vec<Curve>)> = seeds
        .par_iter()
        .map(|&seed| {
            let world = make_world_with(settings.world, seed)?;
            match experiment {
                Experiment::VaryingSteps => run_varying_steps_experiment(&world, settings),
                Experiment::Bias => run_bias_experiment(&world, settings),
                Experiment::Optimizers => run_optimizer_ablation(&world, settings),
                Experiment::Interpolation => run_interpolation_experiment(&world, settings),
            }
        })
        .collect::<Result<_, LabError>>()?;
    let (rows, curves): (Vec<Vec<ReportRow>>, Vec<Vec<Curve>>) = per_seed.into_iter().unzip();
    let rows: Vec<ReportRow> = rows.into_iter().flatten().collect();
    let curves: Vec<Curve> = curves.into_iter().flatten().collect();
    let trends = trends(experiment, settings, seeds, &rows, &curves);
    Ok(ExperimentReport {
        experiment,
        settings: settings.clone(),
        seeds: seeds.to_vec(),
        rows,
        curves,
        trends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic_lab::make_world;

    fn quick() -> LabSettings {
        LabSettings {
            world: WorldConfig {
                d: 8,
                n_pairs: 200,
                prompts: 32,
                ..WorldConfig::default()
            },
            train: TrainConfig {
                steps: 50,
                ..TrainConfig::default()
            },
            curve_alphas: grid_points(0.0, 4.0, 1.0),
            ..LabSettings::default()
        }
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let w = make_world(6, 3, 50, 0.1, 1).unwrap();
        let theta1: Vec<f64> = w.theta0.iter().map(|x| x * 1.7 + 0.1).collect();
        let s = interpolation_sweep(&w, &w.theta0, &theta1, &[0.0, 1.0]).unwrap();
        assert_eq!(s[0].1, true_reward(&w, &w.theta0));
        assert_eq!(s[1].1, true_reward(&w, &theta1));
        assert!(interpolation_sweep(&w, &w.theta0, &theta1, &[1.2]).is_err());
    }

    #[test]
    fn concave_surrogate_is_concave_along_segment() {
        // omega replaced by a concave quadratic: second differences <= 0.
        let f = |t: &[f64]| -t.iter().map(|x| (x - 0.3).powi(2)).sum::<f64>();
        let (a, b) = (vec![1.0, -2.0, 0.5], vec![-1.0, 3.0, 0.0]);
        let ys: Vec<f64> = (0..=10)
            .map(|i| f(&interpolate_theta(&a, &b, i as f64 / 10.0)))
            .collect();
        assert!(ys.windows(3).all(|w| w[0] + w[2] - 2.0 * w[1] <= 1e-12));
    }

    #[test]
    fn extrapolation_at_zero_is_theta1() {
        let t0 = vec![0.1, 0.2];
        let t1 = vec![0.3, -0.7];
        assert_eq!(extrapolate_theta(&t0, &t1, 0.0), t1);
    }

    #[test]
    fn all_experiments_produce_reports() {
        let settings = quick();
        for e in Experiment::ALL {
            let r = run_experiment(e, &[1, 2], &settings).unwrap();
            assert!(!r.rows.is_empty());
            assert!(r.to_csv().starts_with("seed,condition"));
            let sidecar = r.sidecar_json();
            assert_eq!(sidecar["experiment"], e.as_str());
            let consistency = r.trend("extrapolated > trained whenever optimal").unwrap();
            assert_eq!(consistency.holds, 2);
            let again = run_experiment(e, &[1, 2], &settings).unwrap();
            assert_eq!(r, again);
        }
    }

    #[test]
    fn optimizer_rows_are_complete_and_finite() {
        let r = run_experiment(Experiment::Optimizers, &[3], &quick()).unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.condition.as_str()).collect();
        assert_eq!(names, ["adamw", "adagrad", "rmsprop"]);
        assert!(r.rows.iter().all(|r| r.trained_score.is_finite()));
    }

    #[test]
    fn experiment_names_parse() {
        for e in Experiment::ALL {
            assert_eq!(Experiment::parse(e.as_str()), Some(e));
        }
        assert_eq!(Experiment::parse("tables"), None);
    }

    #[test]
    fn forward_difference_converges_to_directional_derivative() {
        let w = make_world(8, 4, 200, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            ..TrainConfig::default()
        };
        let t1 = train(&w, &w.theta0, &cfg).unwrap().theta;
        let dir: Vec<f64> = t1.iter().zip(&w.theta0).map(|(a, b)| a - b).collect();
        let exact = directional_derivative(&w, &w.theta0, &dir, 1e-6);
        let base = true_reward(&w, &w.theta0);
        let mut errs = Vec::new();
        for h in [1e-1, 1e-2, 1e-3] {
            let step: Vec<f64> = w.theta0.iter().zip(&dir).map(|(t, d)| t + h * d).collect();
            errs.push(((true_reward(&w, &step) - base) / h - exact).abs());
        }
        assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    }
}
