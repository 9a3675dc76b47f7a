use serde::Serialize;

use super::ArithError;
use crate::tensor_store::{validate_compatibility, Tensor, TensorSource};

/// Neumaier-compensated `f64` accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.carry);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Sum of squares of `values` in compensated `f64`. Fails on the first
/// non-finite element.
pub fn sum_of_squares(name: &str, values: &[f32]) -> Result<f64, ArithError> {
    let mut acc = CompensatedSum::default();
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(ArithError::NonFinite {
                tensor: name.to_string(),
                index,
            });
        }
        let v = v as f64;
        acc.add(v * v);
    }
    Ok(acc.value())
}

pub fn frobenius_norm(tensor: &Tensor) -> Result<f64, ArithError> {
    sum_of_squares(&tensor.name, &tensor.values).map(f64::sqrt)
}

/// Root mean square of the elements. An empty tensor has norm 0.
pub fn normalized_frobenius_norm(tensor: &Tensor) -> Result<f64, ArithError> {
    let ss = sum_of_squares(&tensor.name, &tensor.values)?;
    Ok(normalize(ss.sqrt(), tensor.values.len()))
}

fn normalize(frobenius: f64, elements: usize) -> f64 {
    if elements == 0 {
        0.0
    } else {
        frobenius / (elements as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormRow {
    pub name: String,
    pub frobenius: f64,
    pub normalized: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormReport {
    pub rows: Vec<NormRow>,
    pub global_frobenius: f64,
    pub global_normalized: f64,
    pub elements: usize,
}

#[derive(Serialize)]
struct Aggregate {
    tensors: usize,
    elements: usize,
    global_frobenius: f64,
    global_normalized: f64,
}

impl NormReport {
    /// Builds a report from per-tensor `(name, sum of squares, elements)`.
    pub fn from_sums(sums: impl IntoIterator<Item = (String, f64, usize)>) -> Self {
        let mut total = CompensatedSum::default();
        let mut elements = 0;
        let rows = sums
            .into_iter()
            .map(|(name, ss, n)| {
                total.add(ss);
                elements += n;
                let frobenius = ss.sqrt();
                NormRow {
                    name,
                    frobenius,
                    normalized: normalize(frobenius, n),
                    elements: n,
                }
            })
            .collect();
        let global_frobenius = total.value().sqrt();
        Self {
            rows,
            global_frobenius,
            global_normalized: normalize(global_frobenius, elements),
            elements,
        }
    }

    /// `name,frobenius,normalized,elements` with a header row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
    }

    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::to_value(Aggregate {
            tensors: self.rows.len(),
            elements: self.elements,
            global_frobenius: self.global_frobenius,
            global_normalized: self.global_normalized,
        })
        .expect("aggregate serializes")
    }
}

/// Norms of `a - b`, one tensor pair resident at a time.
pub fn norm_report(a: &dyn TensorSource, b: &dyn TensorSource) -> Result<NormReport, ArithError> {
    let report = validate_compatibility(a, b);
    if !report.is_compatible() {
        return Err(ArithError::Incompatible(report.to_string()));
    }
    let mut sums = Vec::new();
    for meta in a.metas() {
        let ta = a.read_tensor(&meta.name)?;
        let tb = b.read_tensor(&meta.name)?;
        let mut acc = CompensatedSum::default();
        for (index, (&x, &y)) in ta.values.iter().zip(&tb.values).enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(ArithError::NonFinite {
                    tensor: meta.name.clone(),
                    index,
                });
            }
            let d = x as f64 - y as f64;
            acc.add(d * d);
        }
        sums.push((meta.name.clone(), acc.value(), ta.values.len()));
    }
    Ok(NormReport::from_sums(sums))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::tensor_store::{encode_archive, MemorySource, TensorArchive};

    fn t(values: Vec<f32>) -> Tensor {
        Tensor::vector("p", values)
    }

    fn archive(tensors: &[Tensor]) -> TensorArchive {
        let bytes = encode_archive(tensors, None).unwrap();
        TensorArchive::from_source(Arc::new(MemorySource::new(bytes))).unwrap()
    }

    #[test]
    fn three_four_five() {
        assert_eq!(frobenius_norm(&t(vec![3.0, 4.0])).unwrap(), 5.0);
        let n = normalized_frobenius_norm(&t(vec![3.0, 4.0])).unwrap();
        assert!((n - 5.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(frobenius_norm(&t(vec![0.0; 9])).unwrap(), 0.0);
        assert_eq!(normalized_frobenius_norm(&t(vec![])).unwrap(), 0.0);
    }

    #[test]
    fn constant_tensor_rms() {
        for n in [1, 7, 1000] {
            let v = normalized_frobenius_norm(&t(vec![2.0; n])).unwrap();
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_names_tensor() {
        let err = frobenius_norm(&Tensor::vector("layer.0", vec![1.0, f32::INFINITY])).unwrap_err();
        assert!(err.to_string().contains("layer.0"));
        assert!(matches!(err, ArithError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn compensation_recovers_small_terms() {
        let mut acc = CompensatedSum::default();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 1000.0);
    }

    #[test]
    fn report_of_difference() {
        let a = archive(&[
            Tensor::vector("x", vec![3.0, 4.0]),
            Tensor::vector("y", vec![1.0]),
        ]);
        let b = archive(&[
            Tensor::vector("x", vec![0.0, 0.0]),
            Tensor::vector("y", vec![1.0]),
        ]);
        let r = norm_report(&a, &b).unwrap();
        assert_eq!(r.global_frobenius, 5.0);
        assert_eq!(r.rows[1].frobenius, 0.0);
        assert!((r.global_normalized - 5.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            r.to_csv().lines().collect::<Vec<_>>()[..2],
            [
                "name,frobenius,normalized,elements",
                "x,5.0,3.5355339059327373,2"
            ]
        );
        assert_eq!(r.aggregate_json()["global_frobenius"], 5.0);

        let same = norm_report(&a, &a).unwrap();
        assert!(same.rows.iter().all(|r| r.frobenius == 0.0));
        assert_eq!(same.global_frobenius, 0.0);
    }

    #[test]
    fn report_rejects_incompatible() {
        let a = archive(&[Tensor::vector("x", vec![3.0])]);
        let b = archive(&[Tensor::vector("z", vec![3.0])]);
        assert!(matches!(
            norm_report(&a, &b),
            Err(ArithError::Incompatible(_))
        ));
    }

    // Integer-valued inputs and power-of-two scales keep every f32 operation
    // exact, so the properties can be checked at tight tolerance.
    fn ints() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec((-1000i32..1000).prop_map(|x| x as f32), 1..64)
    }

    proptest! {
        #[test]
        fn homogeneity(p in ints(), k in -10i32..10, neg in any::<bool>()) {
            let c = if neg { -(2f32.powi(k)) } else { 2f32.powi(k) };
            let scaled: Vec<f32> = p.iter().map(|&x| x * c).collect();
            let lhs = frobenius_norm(&t(scaled)).unwrap();
            let rhs = (c as f64).abs() * frobenius_norm(&t(p)).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn triangle(p in ints(), q in ints()) {
            let n = p.len().min(q.len());
            let (p, q) = (p[..n].to_vec(), q[..n].to_vec());
            let s: Vec<f32> = p.iter().zip(&q).map(|(a, b)| a + b).collect();
            let lhs = frobenius_norm(&t(s)).unwrap();
            let rhs = frobenius_norm(&t(p)).unwrap() + frobenius_norm(&t(q)).unwrap();
            prop_assert!(lhs <= rhs + 1e-9);
        }

        #[test]
        fn matches_naive_sum(p in prop::collection::vec(-1e3f32..1e3, 0..2000)) {
            let oracle = p.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            let got = frobenius_norm(&t(p)).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-10 * oracle.max(f64::MIN_POSITIVE));
        }
    }
}
