use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::norm::CompensatedSum;
use super::residency::{hold, ResidencyGauge};
use super::ArithError;
use crate::tensor_store::{
    decode_values, encode_values, validate_compatibility, ArchiveWriter, Checkpoint, DType,
    ShardIndex, StoreError, TensorLayout, TensorSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MergeMode {
    /// `(1 - gamma) * base + gamma * tuned`, gamma in `[0, 1]`.
    Interpolate {
        gamma: f64,
    },
    /// `tuned + alpha * (tuned - base)`, alpha >= 0.
    Extrapolate {
        alpha: f64,
    },
    LinComb {
        c0: f64,
        c1: f64,
    },
}

impl MergeMode {
    /// Coefficients `(c0, c1)` applied to `(base, tuned)`.
    pub fn coefficients(&self) -> (f64, f64) {
        match *self {
            MergeMode::Interpolate { gamma } => (1.0 - gamma, gamma),
            MergeMode::Extrapolate { alpha } => (-alpha, 1.0 + alpha),
            MergeMode::LinComb { c0, c1 } => (c0, c1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CastPolicy {
    #[default]
    PreserveInput,
    ForceF32,
}

impl CastPolicy {
    pub fn output_dtype(self, input: DType) -> DType {
        match self {
            CastPolicy::PreserveInput => input,
            CastPolicy::ForceF32 => DType::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    #[serde(flatten)]
    pub mode: MergeMode,
    #[serde(default)]
    pub cast: CastPolicy,
}

impl MergeSpec {
    pub fn new(mode: MergeMode) -> Self {
        Self {
            mode,
            cast: CastPolicy::PreserveInput,
        }
    }

    pub fn with_cast(mut self, cast: CastPolicy) -> Self {
        self.cast = cast;
        self
    }

    pub fn validate(&self) -> Result<(), ArithError> {
        match self.mode {
            MergeMode::Interpolate { gamma } if !(0.0..=1.0).contains(&gamma) => {
                Err(ArithError::InvalidSpec(format!(
                    "gamma {gamma} is outside [0, 1]; use extrapolation for gamma > 1"
                )))
            }
            MergeMode::Extrapolate { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => Err(
                ArithError::InvalidSpec(format!("alpha must be finite and >= 0, got {alpha}")),
            ),
            mode => {
                let (c0, c1) = mode.coefficients();
                if c0.is_finite() && c1.is_finite() {
                    Ok(())
                } else {
                    Err(ArithError::InvalidSpec(format!(
                        "non-finite coefficients ({c0}, {c1})"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeSummary {
    pub output: PathBuf,
    pub tensor_count: usize,
    pub element_count: usize,
    pub coefficients: (f64, f64),
    /// `||tuned - base||` over all tensors.
    pub delta_frobenius: f64,
}

/// Elementwise `c0 * base + c1 * tuned`, evaluated in `f64` and rounded to
/// `f32`. A term whose coefficient is exactly zero is dropped, so the
/// endpoint combinations reproduce their input exactly (signed zeros and
/// non-finite values included).
pub fn combine_values(c0: f64, c1: f64, base: &[f32], tuned: &[f32]) -> Vec<f32> {
    debug_assert_eq!(base.len(), tuned.len());
    match (c0 == 0.0, c1 == 0.0) {
        (true, true) => vec![0.0; base.len()],
        (true, false) => tuned.iter().map(|&t| (c1 * t as f64) as f32).collect(),
        (false, true) => base.iter().map(|&b| (c0 * b as f64) as f32).collect(),
        (false, false) => base
            .iter()
            .zip(tuned)
            .map(|(&b, &t)| (c0 * b as f64 + c1 * t as f64) as f32)
            .collect(),
    }
}

/// Writes `c0 * base + c1 * tuned` to a single archive at `out`.
pub fn lincomb(
    base: &dyn TensorSource,
    tuned: &dyn TensorSource,
    spec: &MergeSpec,
    out: &Path,
) -> Result<MergeSummary, ArithError> {
    lincomb_with(base, tuned, spec, out, None)
}

/// [`lincomb`] with an optional gauge that observes resident tensor buffers.
pub fn lincomb_with(
    base: &dyn TensorSource,
    tuned: &dyn TensorSource,
    spec: &MergeSpec,
    out: &Path,
    gauge: Option<&ResidencyGauge>,
) -> Result<MergeSummary, ArithError> {
    spec.validate()?;
    ensure_compatible(base, tuned)?;
    let names: Vec<String> = tuned.metas().iter().map(|m| m.name.clone()).collect();
    let mut delta = CompensatedSum::default();
    let element_count = merge_into_file(base, tuned, spec, &names, out, gauge, &mut delta)?;
    Ok(MergeSummary {
        output: out.to_path_buf(),
        tensor_count: names.len(),
        element_count,
        coefficients: spec.mode.coefficients(),
        delta_frobenius: delta.value().sqrt(),
    })
}

/// Like [`lincomb`], but when `base` is sharded and `out` names a `.json`
/// index, the output mirrors the base's shard layout: one output shard per
/// base shard, written next to the index under the same file name.
pub fn lincomb_checkpoint(
    base: &Checkpoint,
    tuned: &Checkpoint,
    spec: &MergeSpec,
    out: &Path,
    gauge: Option<&ResidencyGauge>,
) -> Result<MergeSummary, ArithError> {
    let layout = match base.shard_layout() {
        Some(layout) if out.extension().is_some_and(|e| e == "json") => layout,
        _ => return lincomb_with(base, tuned, spec, out, gauge),
    };
    spec.validate()?;
    ensure_compatible(base, tuned)?;
    let dir = out.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;

    let mut delta = CompensatedSum::default();
    let mut element_count = 0;
    let mut tensor_count = 0;
    let mut index = ShardIndex {
        weight_map: Default::default(),
    };
    for (file, names) in &layout {
        element_count +=
            merge_into_file(base, tuned, spec, names, &dir.join(file), gauge, &mut delta)?;
        tensor_count += names.len();
        for name in names {
            index.weight_map.insert(name.clone(), file.clone());
        }
    }
    let text = serde_json::to_vec_pretty(&index).expect("index serializes");
    fs::write(out, text).map_err(|e| StoreError::io(out, e))?;
    Ok(MergeSummary {
        output: out.to_path_buf(),
        tensor_count,
        element_count,
        coefficients: spec.mode.coefficients(),
        delta_frobenius: delta.value().sqrt(),
    })
}

/// `tuned + alpha * (tuned - base)`.
pub fn extrapolate(
    base: &dyn TensorSource,
    tuned: &dyn TensorSource,
    alpha: f64,
    out: &Path,
) -> Result<MergeSummary, ArithError> {
    lincomb(
        base,
        tuned,
        &MergeSpec::new(MergeMode::Extrapolate { alpha }),
        out,
    )
}

/// `base + gamma * (tuned - base)` for gamma in `[0, 1]`.
pub fn interpolate(
    base: &dyn TensorSource,
    tuned: &dyn TensorSource,
    gamma: f64,
    out: &Path,
) -> Result<MergeSummary, ArithError> {
    lincomb(
        base,
        tuned,
        &MergeSpec::new(MergeMode::Interpolate { gamma }),
        out,
    )
}

fn ensure_compatible(base: &dyn TensorSource, tuned: &dyn TensorSource) -> Result<(), ArithError> {
    let report = validate_compatibility(base, tuned);
    if report.is_compatible() {
        Ok(())
    } else {
        Err(ArithError::Incompatible(report.to_string()))
    }
}

/// Streams `names` into one archive file; returns the number of elements
/// written and adds `||tuned - base||^2` for those tensors to `delta`.
fn merge_into_file(
    base: &dyn TensorSource,
    tuned: &dyn TensorSource,
    spec: &MergeSpec,
    names: &[String],
    out: &Path,
    gauge: Option<&ResidencyGauge>,
    delta: &mut CompensatedSum,
) -> Result<usize, ArithError> {
    let (c0, c1) = spec.mode.coefficients();
    let layout: Vec<TensorLayout> = names
        .iter()
        .map(|name| {
            let meta = tuned.meta(name).expect("compatibility checked");
            TensorLayout {
                name: name.clone(),
                dtype: spec.cast.output_dtype(meta.dtype),
                shape: meta.shape.clone(),
            }
        })
        .collect();
    let mut writer = ArchiveWriter::create(out, layout.clone(), None)?;
    let mut elements = 0;
    for entry in &layout {
        let name = entry.name.as_str();
        let in_dtype = tuned.meta(name).expect("compatibility checked").dtype;

        let _base_slot = hold(gauge);
        let base_raw = base.read_raw(name)?;
        let base_vals = decode_values(in_dtype, &base_raw);

        let _tuned_slot = hold(gauge);
        let tuned_raw = tuned.read_raw(name)?;
        let tuned_vals = decode_values(in_dtype, &tuned_raw);

        for (&b, &t) in base_vals.iter().zip(&tuned_vals) {
            let d = t as f64 - b as f64;
            delta.add(d * d);
        }
        elements += tuned_vals.len();

        let _out_slot = hold(gauge);
        if entry.dtype == in_dtype && (c0, c1) == (0.0, 1.0) {
            writer.write_raw(name, &tuned_raw)?;
        } else if entry.dtype == in_dtype && (c0, c1) == (1.0, 0.0) {
            writer.write_raw(name, &base_raw)?;
        } else {
            let combined = combine_values(c0, c1, &base_vals, &tuned_vals);
            writer.write_raw(name, &encode_values(entry.dtype, &combined))?;
        }
    }
    writer.finish()?;
    Ok(elements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{open_archive, write_archive, Tensor};

    fn pair(dir: &Path, base: Vec<f32>, tuned: Vec<f32>) -> (Checkpoint, Checkpoint) {
        write_archive(
            dir.join("base.safetensors"),
            &[Tensor::vector("w", base)],
            None,
        )
        .unwrap();
        write_archive(
            dir.join("tuned.safetensors"),
            &[Tensor::vector("w", tuned)],
            None,
        )
        .unwrap();
        (
            Checkpoint::open(dir.join("base.safetensors")).unwrap(),
            Checkpoint::open(dir.join("tuned.safetensors")).unwrap(),
        )
    }

    fn values(path: &Path) -> Vec<f32> {
        open_archive(path).unwrap().read_tensor("w").unwrap().values
    }

    #[test]
    fn extrapolates_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path(), vec![1.0, 2.0], vec![2.0, 1.0]);
        let out = dir.path().join("o.safetensors");
        let summary = extrapolate(&b, &t, 0.5, &out).unwrap();
        assert_eq!(values(&out), vec![2.5, 0.5]);
        assert_eq!(summary.tensor_count, 1);
        assert!((summary.delta_frobenius - 2f64.sqrt()).abs() < 1e-12);

        extrapolate(&b, &t, 0.0, &out).unwrap();
        assert_eq!(values(&out), vec![2.0, 1.0]);
    }

    #[test]
    fn single_element_extrapolation() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path(), vec![0.0], vec![1.0]);
        let out = dir.path().join("o.safetensors");
        extrapolate(&b, &t, 0.3, &out).unwrap();
        assert_eq!(values(&out), vec![1.3]);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path(), vec![0.0, 2.0], vec![2.0, 0.0]);
        let out = dir.path().join("o.safetensors");
        interpolate(&b, &t, 0.5, &out).unwrap();
        assert_eq!(values(&out), vec![1.0, 1.0]);
        interpolate(&b, &t, 0.0, &out).unwrap();
        assert_eq!(values(&out), vec![0.0, 2.0]);
        interpolate(&b, &t, 1.0, &out).unwrap();
        assert_eq!(values(&out), vec![2.0, 0.0]);
    }

    #[test]
    fn rejects_out_of_range_coefficients() {
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = pair(dir.path(), vec![0.0], vec![1.0]);
        let out = dir.path().join("o.safetensors");
        assert!(matches!(
            extrapolate(&b, &t, -0.1, &out),
            Err(ArithError::InvalidSpec(_))
        ));
        assert!(matches!(
            interpolate(&b, &t, 1.5, &out),
            Err(ArithError::InvalidSpec(_))
        ));
        assert!(!out.exists());
    }

    #[test]
    fn rejects_incompatible_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let (b, _) = pair(dir.path(), vec![0.0], vec![1.0]);
        write_archive(
            dir.path().join("x.safetensors"),
            &[Tensor::vector("w", vec![1.0, 2.0])],
            None,
        )
        .unwrap();
        let x = Checkpoint::open(dir.path().join("x.safetensors")).unwrap();
        let err = extrapolate(&b, &x, 1.0, &dir.path().join("o.safetensors")).unwrap_err();
        assert!(matches!(err, ArithError::Incompatible(ref m) if m.contains("w")));
    }

    #[test]
    fn zero_coefficient_preserves_signed_zero() {
        let out = combine_values(0.0, 1.0, &[-3.0, 5.0], &[-0.0, f32::NAN]);
        assert_eq!(out[0].to_bits(), (-0.0f32).to_bits());
        assert!(out[1].is_nan());
    }

    #[test]
    fn bf16_output_is_requantized() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(
            dir.path().join("b.safetensors"),
            &[Tensor::new("w", DType::BF16, vec![1], vec![1.0])],
            None,
        )
        .unwrap();
        write_archive(
            dir.path().join("t.safetensors"),
            &[Tensor::new("w", DType::BF16, vec![1], vec![1.0078125])],
            None,
        )
        .unwrap();
        let b = Checkpoint::open(dir.path().join("b.safetensors")).unwrap();
        let t = Checkpoint::open(dir.path().join("t.safetensors")).unwrap();
        let out = dir.path().join("o.safetensors");
        // 1.0078125 + 0.25 * 0.0078125 = 1.009765625 is not a bf16 value.
        extrapolate(&b, &t, 0.25, &out).unwrap();
        let a = open_archive(&out).unwrap();
        assert_eq!(a.meta("w").unwrap().dtype, DType::BF16);
        assert_eq!(a.read_tensor("w").unwrap().values, vec![1.0078125]);

        let spec =
            MergeSpec::new(MergeMode::Extrapolate { alpha: 0.25 }).with_cast(CastPolicy::ForceF32);
        lincomb(&b, &t, &spec, &out).unwrap();
        let a = open_archive(&out).unwrap();
        assert_eq!(a.meta("w").unwrap().dtype, DType::F32);
        assert_eq!(
            a.read_tensor("w").unwrap().values,
            vec![1.0 + 10.0 / 1024.0]
        );
    }
}
