use std::fs;
use std::path::Path;

use expo_core::model_arith::{
    extrapolate, interpolate, lincomb, lincomb_checkpoint, lincomb_with, norm_report, CastPolicy,
    MergeMode, MergeSpec, ResidencyGauge,
};
use expo_core::tensor_store::{write_archive, Checkpoint, DType, Tensor, TensorSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensors(rng: &mut ChaCha8Rng, n: usize, len: usize, dtype: DType) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let v = (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            Tensor::new(format!("blocks.{i}.w"), dtype, vec![len], v)
        })
        .collect()
}

fn pair(dir: &Path, seed: u64, n: usize, len: usize, dtype: DType) -> (Checkpoint, Checkpoint) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = dir.join("base.safetensors");
    let t = dir.join("tuned.safetensors");
    write_archive(&b, &random_tensors(&mut rng, n, len, dtype), None).unwrap();
    write_archive(&t, &random_tensors(&mut rng, n, len, dtype), None).unwrap();
    (Checkpoint::open(&b).unwrap(), Checkpoint::open(&t).unwrap())
}

fn values(c: &dyn TensorSource) -> Vec<Vec<f32>> {
    c.metas()
        .iter()
        .map(|m| c.read_tensor(&m.name).unwrap().values)
        .collect()
}

#[test]
fn extrapolation_matches_scalar_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 0, 5, 200, DType::F32);
    let out = dir.path().join("x.safetensors");
    let alpha = 1.7;
    extrapolate(&base, &tuned, alpha, &out).unwrap();
    let got = values(&Checkpoint::open(&out).unwrap());
    for ((g, b), t) in got.iter().zip(values(&base)).zip(values(&tuned)) {
        for i in 0..g.len() {
            let want = t[i] as f64 + alpha * (t[i] as f64 - b[i] as f64);
            assert!((g[i] as f64 - want).abs() <= 1e-6 * want.abs().max(1e-30));
        }
    }
}

#[test]
fn interpolation_matches_oracle_for_random_gammas() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 1, 3, 64, DType::F32);
    let (bv, tv) = (values(&base), values(&tuned));
    let out = dir.path().join("i.safetensors");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let gamma: f64 = rng.random_range(0.0..=1.0);
        interpolate(&base, &tuned, gamma, &out).unwrap();
        let got = values(&Checkpoint::open(&out).unwrap());
        for k in 0..got.len() {
            for i in 0..got[k].len() {
                let want = (1.0 - gamma) * bv[k][i] as f64 + gamma * tv[k][i] as f64;
                assert!((got[k][i] as f64 - want).abs() <= 1e-6 * want.abs().max(1e-6));
            }
        }
    }
}

#[test]
fn extrapolation_is_the_matching_linear_combination() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 2, 4, 50, DType::BF16);
    let a = dir.path().join("a.safetensors");
    let b = dir.path().join("b.safetensors");
    let alpha = 0.3;
    extrapolate(&base, &tuned, alpha, &a).unwrap();
    let spec = MergeSpec::new(MergeMode::LinComb {
        c0: -alpha,
        c1: 1.0 + alpha,
    });
    lincomb(&base, &tuned, &spec, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn endpoint_combinations_copy_inputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, dtype) in [(3, DType::F32), (4, DType::F16), (5, DType::BF16)] {
        let (base, tuned) = pair(dir.path(), seed, 3, 33, dtype);
        let out = dir.path().join("copy.safetensors");
        for ((c0, c1), want) in [((0.0, 1.0), "tuned"), ((1.0, 0.0), "base")] {
            lincomb(
                &base,
                &tuned,
                &MergeSpec::new(MergeMode::LinComb { c0, c1 }),
                &out,
            )
            .unwrap();
            let want = dir.path().join(format!("{want}.safetensors"));
            assert_eq!(fs::read(&out).unwrap(), fs::read(&want).unwrap());
        }
    }
}

#[test]
fn force_f32_widens_half_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 6, 2, 8, DType::F16);
    let out = dir.path().join("wide.safetensors");
    let spec =
        MergeSpec::new(MergeMode::Extrapolate { alpha: 0.5 }).with_cast(CastPolicy::ForceF32);
    lincomb(&base, &tuned, &spec, &out).unwrap();
    let wide = Checkpoint::open(&out).unwrap();
    assert!(wide.metas().iter().all(|m| m.dtype == DType::F32));
}

#[test]
fn streaming_merge_holds_at_most_three_buffers() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 7, 64, 128, DType::F32);
    let gauge = ResidencyGauge::new();
    let spec = MergeSpec::new(MergeMode::Extrapolate { alpha: 2.0 });
    lincomb_with(
        &base,
        &tuned,
        &spec,
        &dir.path().join("o.safetensors"),
        Some(&gauge),
    )
    .unwrap();
    assert!(gauge.peak() <= 3, "peak {}", gauge.peak());
    assert_eq!(gauge.current(), 0);
}

#[test]
fn norm_of_extrapolation_step_is_alpha_times_delta() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 8, 6, 300, DType::F32);
    let out = dir.path().join("x.safetensors");
    let alpha = 2.5;
    let summary = extrapolate(&base, &tuned, alpha, &out).unwrap();
    let delta = norm_report(&tuned, &base).unwrap();
    assert!(
        (delta.global_frobenius - summary.delta_frobenius).abs() <= 1e-12 * delta.global_frobenius
    );
    let step = norm_report(&Checkpoint::open(&out).unwrap(), &tuned).unwrap();
    let want = alpha * delta.global_frobenius;
    assert!((step.global_frobenius - want).abs() <= 1e-6 * want);
}

#[test]
fn norms_three_four_five_across_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.safetensors");
    let b = dir.path().join("b.safetensors");
    write_archive(
        &a,
        &[
            Tensor::vector("x", vec![3.0]),
            Tensor::vector("y", vec![4.0]),
        ],
        None,
    )
    .unwrap();
    write_archive(
        &b,
        &[
            Tensor::vector("x", vec![0.0]),
            Tensor::vector("y", vec![0.0]),
        ],
        None,
    )
    .unwrap();
    let r = norm_report(
        &Checkpoint::open(&a).unwrap(),
        &Checkpoint::open(&b).unwrap(),
    )
    .unwrap();
    assert_eq!(r.global_frobenius, 5.0);
    assert_eq!(r.global_normalized, 5.0 / 2f64.sqrt());
    let csv = r.to_csv();
    assert!(csv.starts_with("name,frobenius,normalized,elements\n"));
}

#[test]
fn sharded_merge_mirrors_base_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for side in ["base", "tuned"] {
        let ts = random_tensors(&mut rng, 5, 10, DType::F32);
        let sub = dir.path().join(side);
        fs::create_dir_all(&sub).unwrap();
        write_archive(sub.join("m-1.safetensors"), &ts[..2], None).unwrap();
        write_archive(sub.join("m-2.safetensors"), &ts[2..], None).unwrap();
        let map: serde_json::Map<String, serde_json::Value> = ts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                (
                    t.name.clone(),
                    if i < 2 {
                        "m-1.safetensors"
                    } else {
                        "m-2.safetensors"
                    }
                    .into(),
                )
            })
            .collect();
        fs::write(
            sub.join("index.json"),
            serde_json::json!({ "weight_map": map }).to_string(),
        )
        .unwrap();
    }
    let base = Checkpoint::open(dir.path().join("base/index.json")).unwrap();
    let tuned = Checkpoint::open(dir.path().join("tuned/index.json")).unwrap();
    let out = dir.path().join("out/index.json");
    let spec = MergeSpec::new(MergeMode::Extrapolate { alpha: 1.0 });
    let summary = lincomb_checkpoint(&base, &tuned, &spec, &out, None).unwrap();
    assert_eq!(summary.tensor_count, 5);

    let merged = Checkpoint::open(&out).unwrap();
    assert_eq!(merged.shard_layout(), base.shard_layout());
    let single = dir.path().join("single.safetensors");
    lincomb(&base, &tuned, &spec, &single).unwrap();
    assert_eq!(values(&merged), values(&Checkpoint::open(&single).unwrap()));
}

#[test]
fn rejected_merges_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let (base, tuned) = pair(dir.path(), 10, 2, 4, DType::F32);
    let out = dir.path().join("never.safetensors");
    assert!(extrapolate(&base, &tuned, -1.0, &out).is_err());
    assert!(interpolate(&base, &tuned, 1.5, &out).is_err());
    assert!(!out.exists());
}
