use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use super::{DType, StoreError, TensorSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapeMismatch {
    pub name: String,
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DTypeMismatch {
    pub name: String,
    pub a: DType,
    pub b: DType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NonFiniteFlag {
    pub side: Side,
    pub name: String,
    pub count: usize,
}

/// Differences between two checkpoints' tensor inventories. Non-finite value
/// flags are informational and do not affect [`is_compatible`](Self::is_compatible).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CompatibilityReport {
    pub missing_in_a: Vec<String>,
    pub missing_in_b: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatch>,
    pub dtype_mismatches: Vec<DTypeMismatch>,
    pub non_finite: Vec<NonFiniteFlag>,
}

impl CompatibilityReport {
    pub fn is_compatible(&self) -> bool {
        self.missing_in_a.is_empty()
            && self.missing_in_b.is_empty()
            && self.shape_mismatches.is_empty()
            && self.dtype_mismatches.is_empty()
    }

    /// Every name that is absent from one of the two sides, sorted.
    pub fn missing(&self) -> Vec<String> {
        let all: BTreeSet<&String> = self.missing_in_a.iter().chain(&self.missing_in_b).collect();
        all.into_iter().cloned().collect()
    }

    pub fn into_result(self) -> Result<Self, StoreError> {
        if self.is_compatible() {
            Ok(self)
        } else {
            Err(StoreError::Incompatible(self.to_string()))
        }
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.missing_in_a.is_empty() {
            parts.push(format!("missing from a: {}", self.missing_in_a.join(", ")));
        }
        if !self.missing_in_b.is_empty() {
            parts.push(format!("missing from b: {}", self.missing_in_b.join(", ")));
        }
        for m in &self.shape_mismatches {
            parts.push(format!(
                "shape mismatch on {}: {:?} vs {:?}",
                m.name, m.a, m.b
            ));
        }
        for m in &self.dtype_mismatches {
            parts.push(format!("dtype mismatch on {}: {} vs {}", m.name, m.a, m.b));
        }
        for n in &self.non_finite {
            parts.push(format!(
                "{} non-finite values in {} ({:?})",
                n.count, n.name, n.side
            ));
        }
        if parts.is_empty() {
            f.write_str("compatible")
        } else {
            f.write_str(&parts.join("; "))
        }
    }
}

/// Compares names, shapes and dtypes. Reads headers only.
pub fn validate_compatibility(a: &dyn TensorSource, b: &dyn TensorSource) -> CompatibilityReport {
    let mut report = CompatibilityReport::default();
    for ma in a.metas() {
        match b.meta(&ma.name) {
            None => report.missing_in_b.push(ma.name.clone()),
            Some(mb) => {
                if ma.shape != mb.shape {
                    report.shape_mismatches.push(ShapeMismatch {
                        name: ma.name.clone(),
                        a: ma.shape.clone(),
                        b: mb.shape.clone(),
                    });
                }
                if ma.dtype != mb.dtype {
                    report.dtype_mismatches.push(DTypeMismatch {
                        name: ma.name.clone(),
                        a: ma.dtype,
                        b: mb.dtype,
                    });
                }
            }
        }
    }
    for mb in b.metas() {
        if a.meta(&mb.name).is_none() {
            report.missing_in_a.push(mb.name.clone());
        }
    }
    report
}

/// Reads every tensor on both sides and flags NaN/Inf values in `report`.
pub fn scan_non_finite(
    report: &mut CompatibilityReport,
    a: &dyn TensorSource,
    b: &dyn TensorSource,
) -> Result<(), StoreError> {
    for (side, source) in [(Side::A, a), (Side::B, b)] {
        for meta in source.metas() {
            let tensor = source.read_tensor(&meta.name)?;
            let count = tensor.values.iter().filter(|v| !v.is_finite()).count();
            if count > 0 {
                report.non_finite.push(NonFiniteFlag {
                    side,
                    name: meta.name.clone(),
                    count,
                });
            }
        }
    }
    Ok(())
}
