use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{snap_alpha, CandidatePoint, Objective, SearchError};
use crate::model_arith::{
    combine_values, lincomb_with, ArithError, CastPolicy, CompensatedSum, MergeMode, MergeSpec,
};
use crate::synthetic_lab::{make_world_with, true_reward, LabWorld, WorldConfig};
use crate::tensor_store::{
    decode_values, encode_values, validate_compatibility, Checkpoint, TensorSource,
};

/// Marker in an external command template replaced by the quoted candidate
/// path.
pub const CANDIDATE_PLACEHOLDER: &str = "{candidate}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinKind {
    /// `-||theta - theta_star||^2` with `theta_star` the extrapolation at
    /// `peak_alpha`.
    Quadratic,
    /// Synthetic-lab `omega` of a rank-1 tensor named `theta`, in the world
    /// given by `seed` (and optional `d`, `k`, `n_pairs`, `noise`, `prompts`).
    LabReward,
}

impl BuiltinKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "quadratic" => Some(BuiltinKind::Quadratic),
            "lab-reward" => Some(BuiltinKind::LabReward),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorSpec {
    /// Run through `sh -c`; the last non-empty stdout line is the score.
    ExternalCommand {
        template: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<f64>,
    },
    /// JSON lines `{"alpha": a, "score": s}` filled in out of band.
    ScoreFile { path: PathBuf },
    Builtin {
        name: BuiltinKind,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
}

impl EvaluatorSpec {
    pub fn validate(&self) -> Result<(), SearchError> {
        match self {
            EvaluatorSpec::ExternalCommand {
                template,
                timeout_secs,
            } => {
                let n = template.matches(CANDIDATE_PLACEHOLDER).count();
                if n != 1 {
                    return Err(SearchError::InvalidConfig(format!(
                        "command template must contain {CANDIDATE_PLACEHOLDER} exactly once, found {n}"
                    )));
                }
                if let Some(t) = timeout_secs {
                    if !(t.is_finite() && *t > 0.0) {
                        return Err(SearchError::InvalidConfig(format!(
                            "timeout must be > 0 seconds, got {t}"
                        )));
                    }
                }
                Ok(())
            }
            EvaluatorSpec::ScoreFile { .. } => Ok(()),
            EvaluatorSpec::Builtin { name, params } => {
                let allowed: &[&str] = match name {
                    BuiltinKind::Quadratic => &["peak_alpha"],
                    BuiltinKind::LabReward => &["seed", "d", "k", "n_pairs", "noise", "prompts"],
                };
                match params.keys().find(|k| !allowed.contains(&k.as_str())) {
                    Some(k) => Err(SearchError::InvalidConfig(format!(
                        "unknown parameter {k:?} for builtin evaluator (allowed: {})",
                        allowed.join(", ")
                    ))),
                    None => Ok(()),
                }
            }
        }
    }
}

/// Single-quotes `s` for `sh`.
pub fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn read_score_file(path: &Path) -> Result<Vec<(f64, f64)>, SearchError> {
    #[derive(Deserialize)]
    struct Line {
        alpha: f64,
        score: f64,
    }
    let bad = |reason: String| {
        SearchError::InvalidConfig(format!("score file {}: {reason}", path.display()))
    };
    let text = fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Line>(l)
                .map(|x| (snap_alpha(x.alpha), x.score))
                .map_err(|e| bad(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn lab_world(params: &BTreeMap<String, f64>) -> Result<LabWorld, SearchError> {
    let get = |k: &str| params.get(k).copied();
    let int = |k: &str, default: usize| -> Result<usize, SearchError> {
        match get(k) {
            None => Ok(default),
            Some(v) if v >= 0.0 && v.fract() == 0.0 => Ok(v as usize),
            Some(v) => Err(SearchError::InvalidConfig(format!(
                "parameter {k} must be a non-negative integer, got {v}"
            ))),
        }
    };
    let d = WorldConfig::default();
    let config = WorldConfig {
        d: int("d", d.d)?,
        k: int("k", d.k)?,
        n_pairs: int("n_pairs", d.n_pairs)?,
        prompts: int("prompts", d.prompts)?,
        noise: get("noise").unwrap_or(d.noise),
        ..d
    };
    let seed = int("seed", 0)? as u64;
    make_world_with(config, seed).map_err(|e| SearchError::InvalidConfig(e.to_string()))
}

/// Materializes extrapolated checkpoints in a work directory and scores them.
pub struct CheckpointObjective<'a> {
    base: &'a Checkpoint,
    tuned: &'a Checkpoint,
    evaluator: &'a EvaluatorSpec,
    workdir: PathBuf,
    cast: CastPolicy,
    scores: Vec<(f64, f64)>,
    world: Option<LabWorld>,
}

impl<'a> CheckpointObjective<'a> {
    pub fn new(
        base: &'a Checkpoint,
        tuned: &'a Checkpoint,
        evaluator: &'a EvaluatorSpec,
        workdir: impl Into<PathBuf>,
    ) -> Result<Self, SearchError> {
        evaluator.validate()?;
        let report = validate_compatibility(base, tuned);
        if !report.is_compatible() {
            return Err(ArithError::Incompatible(report.to_string()).into());
        }
        let workdir = workdir.into();
        fs::create_dir_all(&workdir).map_err(|e| {
            SearchError::InvalidConfig(format!("cannot create workdir {}: {e}", workdir.display()))
        })?;
        let scores = match evaluator {
            EvaluatorSpec::ScoreFile { path } => read_score_file(path)?,
            _ => Vec::new(),
        };
        let world = match evaluator {
            EvaluatorSpec::Builtin {
                name: BuiltinKind::LabReward,
                params,
            } => Some(lab_world(params)?),
            _ => None,
        };
        Ok(Self {
            base,
            tuned,
            evaluator,
            workdir,
            cast: CastPolicy::PreserveInput,
            scores,
            world,
        })
    }

    pub fn with_cast(mut self, cast: CastPolicy) -> Self {
        self.cast = cast;
        self
    }

    pub fn candidate_path(&self, alpha: f64) -> PathBuf {
        self.workdir
            .join(format!("candidate-alpha-{}.safetensors", snap_alpha(alpha)))
    }

    /// Writes (or reuses) the candidate for `alpha` and returns its path.
    pub fn materialize(&self, alpha: f64) -> Result<PathBuf, SearchError> {
        let alpha = snap_alpha(alpha);
        if alpha == 0.0 && self.cast == CastPolicy::PreserveInput {
            if let Checkpoint::Single(a) = self.tuned {
                if let Some(p) = a.path() {
                    return Ok(p.to_path_buf());
                }
            }
        }
        let path = self.candidate_path(alpha);
        if self.reusable(&path) {
            return Ok(path);
        }
        let spec = MergeSpec::new(MergeMode::Extrapolate { alpha }).with_cast(self.cast);
        lincomb_with(self.base, self.tuned, &spec, &path, None)?;
        Ok(path)
    }

    /// A cached candidate is reused when its layout matches what this
    /// objective would write.
    fn reusable(&self, path: &Path) -> bool {
        let Ok(existing) = Checkpoint::open(path) else {
            return false;
        };
        existing.tensor_count() == self.tuned.tensor_count()
            && self.tuned.metas().iter().all(|m| {
                existing.meta(&m.name).is_some_and(|e| {
                    e.shape == m.shape && e.dtype == self.cast.output_dtype(m.dtype)
                })
            })
    }

    fn builtin_score(
        &self,
        kind: BuiltinKind,
        params: &BTreeMap<String, f64>,
        candidate: &Checkpoint,
        alpha: f64,
    ) -> Result<CandidatePoint, SearchError> {
        match kind {
            BuiltinKind::Quadratic => {
                let peak = params.get("peak_alpha").copied().unwrap_or(1.0);
                let mut acc = CompensatedSum::default();
                for meta in self.tuned.metas() {
                    let b = self
                        .base
                        .read_tensor(&meta.name)
                        .map_err(ArithError::from)?;
                    let t = self
                        .tuned
                        .read_tensor(&meta.name)
                        .map_err(ArithError::from)?;
                    let c = candidate
                        .read_tensor(&meta.name)
                        .map_err(ArithError::from)?;
                    // Quantize the target like a candidate so alpha == peak scores 0.
                    let dtype = self.cast.output_dtype(meta.dtype);
                    let star = decode_values(
                        dtype,
                        &encode_values(
                            dtype,
                            &combine_values(-peak, 1.0 + peak, &b.values, &t.values),
                        ),
                    );
                    for (x, y) in c.values.iter().zip(&star) {
                        let d = *x as f64 - *y as f64;
                        acc.add(d * d);
                    }
                }
                Ok(CandidatePoint::new(alpha, -acc.value()))
            }
            BuiltinKind::LabReward => {
                let world = self.world.as_ref().expect("world built for lab-reward");
                let theta = candidate
                    .read_tensor("theta")
                    .map_err(|e| SearchError::evaluator(alpha, e.to_string()))?;
                if theta.values.len() != world.config.d {
                    return Err(SearchError::evaluator(
                        alpha,
                        format!(
                            "tensor theta has {} elements, world has d = {}",
                            theta.values.len(),
                            world.config.d
                        ),
                    ));
                }
                let theta: Vec<f64> = theta.values.iter().map(|&v| v as f64).collect();
                Ok(CandidatePoint::new(alpha, true_reward(world, &theta))
                    .with_aux("spurious", theta[world.spurious]))
            }
        }
    }
}

impl Objective for CheckpointObjective<'_> {
    fn evaluate(&self, alpha: f64) -> Result<CandidatePoint, SearchError> {
        let alpha = snap_alpha(alpha);
        match self.evaluator {
            EvaluatorSpec::ScoreFile { path } => {
                match self.scores.iter().find(|(a, _)| *a == alpha) {
                    Some(&(_, score)) => {
                        let cached = self.candidate_path(alpha);
                        let mut p = CandidatePoint::new(alpha, score);
                        p.candidate = cached.exists().then_some(cached);
                        Ok(p)
                    }
                    None => {
                        let candidate = self.materialize(alpha)?;
                        Err(SearchError::evaluator(
                            alpha,
                            format!(
                                "no score for alpha {alpha} in {}; candidate is at {}",
                                path.display(),
                                candidate.display()
                            ),
                        ))
                    }
                }
            }
            EvaluatorSpec::ExternalCommand {
                template,
                timeout_secs,
            } => {
                let candidate = self.materialize(alpha)?;
                let timeout = timeout_secs.map(Duration::from_secs_f64);
                let score = run_command(template, &candidate, alpha, timeout)?;
                let mut p = CandidatePoint::new(alpha, score);
                p.candidate = Some(candidate);
                Ok(p)
            }
            EvaluatorSpec::Builtin { name, params } => {
                let path = self.materialize(alpha)?;
                let candidate = Checkpoint::open(&path).map_err(ArithError::from)?;
                let mut p = self.builtin_score(*name, params, &candidate, alpha)?;
                p.candidate = Some(path);
                Ok(p)
            }
        }
    }
}

/// Materializes the candidate at `alpha` under `workdir` and scores it.
pub fn evaluate_candidate(
    base: &Checkpoint,
    tuned: &Checkpoint,
    alpha: f64,
    evaluator: &EvaluatorSpec,
    workdir: &Path,
) -> Result<CandidatePoint, SearchError> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(SearchError::InvalidConfig(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    CheckpointObjective::new(base, tuned, evaluator, workdir)?.evaluate(alpha)
}

fn run_command(
    template: &str,
    candidate: &Path,
    alpha: f64,
    timeout: Option<Duration>,
) -> Result<f64, SearchError> {
    let command = template.replacen(
        CANDIDATE_PLACEHOLDER,
        &shell_quote(&candidate.to_string_lossy()),
        1,
    );
    let fail = |what: String| SearchError::evaluator(alpha, format!("command `{command}` {what}"));

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .env("EXPO_ALPHA", alpha.to_string())
        .env("EXPO_CANDIDATE", candidate)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| fail(format!("could not start: {e}")))?;
    let mut stdout = child.stdout.take().expect("stdout is piped");
    let reader = thread::spawn(move || {
        let mut out = Vec::new();
        let _ = stdout.read_to_end(&mut out);
        out
    });

    let deadline = timeout.map(|t| Instant::now() + t);
    let status: ExitStatus = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {}
            Err(e) => return Err(fail(format!("could not be waited on: {e}"))),
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            kill_tree(&mut child);
            return Err(fail(format!(
                "timed out after {:.3} s",
                timeout.expect("deadline implies timeout").as_secs_f64()
            )));
        }
        thread::sleep(Duration::from_millis(5));
    };
    let out = reader.join().unwrap_or_default();
    if !status.success() {
        return Err(fail(format!("exited with {status}")));
    }
    let text = String::from_utf8_lossy(&out);
    let Some(last) = text.lines().map(str::trim).rfind(|l| !l.is_empty()) else {
        return Err(fail("printed no score".into()));
    };
    match last.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(fail(format!("printed an unparsable score {last:?}"))),
    }
}

fn kill_tree(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        let _ = Command::new("kill")
            .arg("-KILL")
            .arg("--")
            .arg(format!("-{}", child.id()))
            .stderr(Stdio::null())
            .status();
    }
    let _ = child.kill();
    let _ = child.wait();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{open_archive, write_archive, Tensor};

    fn pair(dir: &Path) -> (Checkpoint, Checkpoint) {
        write_archive(
            dir.join("base.safetensors"),
            &[
                Tensor::vector("a", vec![0.0, 1.0]),
                Tensor::vector("b", vec![2.0]),
            ],
            None,
        )
        .unwrap();
        write_archive(
            dir.join("tuned.safetensors"),
            &[
                Tensor::vector("a", vec![1.0, 1.5]),
                Tensor::vector("b", vec![1.0]),
            ],
            None,
        )
        .unwrap();
        (
            Checkpoint::open(dir.join("base.safetensors")).unwrap(),
            Checkpoint::open(dir.join("tuned.safetensors")).unwrap(),
        )
    }

    fn quadratic(peak: f64) -> EvaluatorSpec {
        EvaluatorSpec::Builtin {
            name: BuiltinKind::Quadratic,
            params: [("peak_alpha".to_string(), peak)].into(),
        }
    }

    #[test]
    fn quadratic_scores_zero_at_its_peak() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path());
        let work = dir.path().join("work");
        let p = evaluate_candidate(&b, &t, 2.0, &quadratic(2.0), &work).unwrap();
        assert_eq!(p.score, 0.0);
        let cand = p.candidate.unwrap();
        assert_eq!(cand, work.join("candidate-alpha-2.safetensors"));
        assert_eq!(
            open_archive(&cand)
                .unwrap()
                .read_tensor("a")
                .unwrap()
                .values,
            vec![3.0, 2.5]
        );
        // Closed form: -(alpha - peak)^2 * ||delta||^2 with ||delta||^2 = 2.25.
        let p = evaluate_candidate(&b, &t, 0.5, &quadratic(2.0), &work).unwrap();
        assert!((p.score + 2.25 * 2.25).abs() < 1e-9);
    }

    #[test]
    fn baseline_uses_tuned_file() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path());
        let spec = quadratic(1.0);
        let obj = CheckpointObjective::new(&b, &t, &spec, dir.path().join("w")).unwrap();
        assert_eq!(
            obj.materialize(0.0).unwrap(),
            dir.path().join("tuned.safetensors")
        );
    }

    #[test]
    fn external_command_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path());
        let work = dir.path().join("work dir");
        let cmd = |s: &str| EvaluatorSpec::ExternalCommand {
            template: s.to_string(),
            timeout_secs: Some(5.0),
        };
        let p = evaluate_candidate(
            &b,
            &t,
            1.0,
            &cmd("test -f {candidate} && echo progress && echo 5.0"),
            &work,
        )
        .unwrap();
        assert_eq!(p.score, 5.0);

        let p = evaluate_candidate(&b, &t, 0.5, &cmd("echo $EXPO_ALPHA; : {candidate}"), &work)
            .unwrap();
        assert_eq!(p.score, 0.5);

        let err = evaluate_candidate(&b, &t, 1.0, &cmd("exit 1 # {candidate}"), &work).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, SearchError::Evaluator { .. }));
        assert!(msg.contains("alpha 1") && msg.contains("exit 1"), "{msg}");

        let err =
            evaluate_candidate(&b, &t, 1.0, &cmd("echo nope {candidate}"), &work).unwrap_err();
        assert!(err.to_string().contains("unparsable"));
    }

    #[test]
    fn external_command_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path());
        let spec = EvaluatorSpec::ExternalCommand {
            template: "sleep 5; echo 1 {candidate}".into(),
            timeout_secs: Some(0.2),
        };
        let start = Instant::now();
        let err = evaluate_candidate(&b, &t, 1.0, &spec, dir.path()).unwrap_err();
        assert!(err.to_string().contains("timed out"));
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn template_needs_one_placeholder() {
        for t in ["echo 1", "echo {candidate} {candidate}"] {
            let spec = EvaluatorSpec::ExternalCommand {
                template: t.into(),
                timeout_secs: None,
            };
            assert!(matches!(
                spec.validate(),
                Err(SearchError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn score_file_lookup_and_missing_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path());
        let scores = dir.path().join("scores.jsonl");
        fs::write(
            &scores,
            "{\"alpha\": 0.0, \"score\": 1.0}\n\n{\"alpha\": 0.3, \"score\": 2.0}\n",
        )
        .unwrap();
        let spec = EvaluatorSpec::ScoreFile { path: scores };
        let work = dir.path().join("w");
        let obj = CheckpointObjective::new(&b, &t, &spec, &work).unwrap();
        assert_eq!(obj.evaluate(0.1 + 0.2).unwrap().score, 2.0);
        assert!(!work.join("candidate-alpha-0.3.safetensors").exists());
        let err = obj.evaluate(0.5).unwrap_err();
        assert!(err.to_string().contains("no score for alpha 0.5"));
        assert!(work.join("candidate-alpha-0.5.safetensors").exists());
    }

    #[test]
    fn shell_quoting() {
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
    }

    #[test]
    fn lab_reward_reads_theta() {
        let dir = tempfile::tempdir().unwrap();
        let world = lab_world(&[("seed".to_string(), 3.0)].into()).unwrap();
        let theta0: Vec<f32> = world.theta0.iter().map(|&x| x as f32).collect();
        let theta1: Vec<f32> = theta0.iter().map(|x| x * 1.5).collect();
        write_archive(
            dir.path().join("b.safetensors"),
            &[Tensor::vector("theta", theta0)],
            None,
        )
        .unwrap();
        write_archive(
            dir.path().join("t.safetensors"),
            &[Tensor::vector("theta", theta1.clone())],
            None,
        )
        .unwrap();
        let b = Checkpoint::open(dir.path().join("b.safetensors")).unwrap();
        let t = Checkpoint::open(dir.path().join("t.safetensors")).unwrap();
        let spec = EvaluatorSpec::Builtin {
            name: BuiltinKind::LabReward,
            params: [("seed".to_string(), 3.0)].into(),
        };
        let p = evaluate_candidate(&b, &t, 0.0, &spec, dir.path()).unwrap();
        let direct: Vec<f64> = theta1.iter().map(|&x| x as f64).collect();
        assert_eq!(p.score, true_reward(&world, &direct));

        let bad = EvaluatorSpec::Builtin {
            name: BuiltinKind::LabReward,
            params: [("sed".to_string(), 3.0)].into(),
        };
        assert!(bad.validate().is_err());
    }
}
