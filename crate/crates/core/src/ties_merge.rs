//! TIES merging: trim each task vector to its largest-magnitude components,
//! elect a sign per component from the sum of the trimmed vectors, average only
//! the components that agree with the elected sign, and add the result back to
//! the base with a scale.
//!
//! `sign(0) = 0` everywhere. A zero entry of a trimmed vector never joins the
//! agreement set of a component whose elected sign is nonzero, and a component
//! whose elected sign is zero merges to zero.
//!
//! Inputs are put in a canonical order (by parameter checksum) before any
//! reduction, so the merge is bitwise independent of the order models are
//! supplied in.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::param_store::{ParamSet, StoreError};
use crate::task_arith::TaskVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrimScope {
    /// Top-k over the whole flattened vector.
    #[default]
    Global,
    /// Top-k within each named entry separately.
    PerEntry,
}

impl FromStr for TrimScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Self::Global),
            "per-entry" | "per_entry" => Ok(Self::PerEntry),
            other => Err(format!("unknown trim scope {other:?} (expected global|per-entry)")),
        }
    }
}

impl fmt::Display for TrimScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::PerEntry => "per-entry",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSpec {
    /// Fraction of components kept by trimming, in `(0, 1]`.
    pub trim_fraction: f64,
    /// Scale on the merged task vector, `> 0`.
    pub lambda: f64,
    pub trim_scope: TrimScope,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            trim_fraction: 0.2,
            lambda: 1.0,
            trim_scope: TrimScope::Global,
        }
    }
}

impl MergeSpec {
    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.trim_fraction > 0.0 && self.trim_fraction <= 1.0) {
            return Err(MergeError::InvalidSpec(format!(
                "trim_fraction must be in (0, 1], got {}",
                self.trim_fraction
            )));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(MergeError::InvalidSpec(format!(
                "lambda must be finite and > 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("invalid merge spec: {0}")]
    InvalidSpec(String),
    #[error("nothing to merge")]
    NoModels,
    #[error("task vectors were built against different bases")]
    FingerprintMismatch,
    #[error("sign vector has {got} entries, task vectors have {expected}")]
    SignLength { expected: usize, got: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Everything the merge decided, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub spec: MergeSpec,
    /// Input positions in the canonical order used for every reduction.
    pub model_order: Vec<usize>,
    /// Surviving components per task vector, in canonical order.
    pub kept_counts: Vec<usize>,
    /// Elected sign per flat component.
    pub elected_signs: Vec<i8>,
    /// `|A^p|` per flat component.
    pub agreement_set_sizes: Vec<u32>,
    /// `|trimmed τ_t|` per task vector, canonical order. Recorded only.
    pub magnitudes: Vec<Vec<f32>>,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Number of components kept out of `d`.
pub fn keep_count(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64).ceil() as usize).min(d)
}

/// Keeps the `keep_count(k, len)` largest magnitudes of `values` in place;
/// equal magnitudes go to the lower index first. Returns the number kept.
fn trim_segment(values: &mut [f64], fraction: f64) -> usize {
    let m = keep_count(fraction, values.len());
    if m == values.len() {
        return m;
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .abs()
            .total_cmp(&values[i].abs())
            .then(i.cmp(&j))
    });
    for &i in &order[m..] {
        values[i] = 0.0;
    }
    m
}

/// Entry sizes of a parameter set in name order.
fn segments(ps: &ParamSet) -> Vec<usize> {
    ps.iter().map(|(_, t)| t.len()).collect()
}

fn trim_flat(values: &mut [f64], segs: &[usize], spec: &MergeSpec) -> usize {
    match spec.trim_scope {
        TrimScope::Global => trim_segment(values, spec.trim_fraction),
        TrimScope::PerEntry => {
            let mut kept = 0;
            let mut offset = 0;
            for &len in segs {
                kept += trim_segment(&mut values[offset..offset + len], spec.trim_fraction);
                offset += len;
            }
            kept
        }
    }
}

fn elect_flat(trimmed: &[Vec<f64>]) -> Vec<i8> {
    let d = trimmed.first().map_or(0, Vec::len);
    (0..d)
        .map(|p| sign(trimmed.iter().map(|t| t[p]).sum::<f64>()))
        .collect()
}

fn disjoint_mean_flat(trimmed: &[Vec<f64>], signs: &[i8]) -> (Vec<f64>, Vec<u32>) {
    let mut merged = vec![0.0; signs.len()];
    let mut sizes = vec![0u32; signs.len()];
    for (p, &elected) in signs.iter().enumerate() {
        if elected == 0 {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0u32;
        for t in trimmed {
            if sign(t[p]) == elected {
                sum += t[p];
                count += 1;
            }
        }
        if count > 0 {
            merged[p] = sum / f64::from(count);
        }
        sizes[p] = count;
    }
    (merged, sizes)
}

fn to_f64(ps: &ParamSet) -> Vec<f64> {
    ps.flatten().into_iter().map(f64::from).collect()
}

fn from_f64(like: &ParamSet, values: &[f64]) -> Result<ParamSet, StoreError> {
    let flat: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    like.with_flat(&flat)
}

/// Sparsifies `tau`, keeping only its largest-magnitude components.
pub fn trim(tau: &TaskVector, spec: &MergeSpec) -> Result<TaskVector, MergeError> {
    spec.validate()?;
    let mut values = to_f64(&tau.delta);
    trim_flat(&mut values, &segments(&tau.delta), spec);
    Ok(TaskVector {
        base_fingerprint: tau.base_fingerprint,
        delta: from_f64(&tau.delta, &values)?,
        rank_info: None,
    })
}

fn check_family(taus: &[TaskVector]) -> Result<(), MergeError> {
    let first = taus.first().ok_or(MergeError::NoModels)?;
    for t in &taus[1..] {
        if t.base_fingerprint != first.base_fingerprint {
            return Err(MergeError::FingerprintMismatch);
        }
        first.delta.check_compatible(&t.delta)?;
    }
    Ok(())
}

/// Per-component sign of the sum of the trimmed vectors, summed in the order
/// given.
pub fn elect_signs(taus: &[TaskVector]) -> Result<Vec<i8>, MergeError> {
    check_family(taus)?;
    let flat: Vec<Vec<f64>> = taus.iter().map(|t| to_f64(&t.delta)).collect();
    Ok(elect_flat(&flat))
}

/// Per-component mean over the vectors whose sign agrees with `signs`.
pub fn disjoint_mean(taus: &[TaskVector], signs: &[i8]) -> Result<TaskVector, MergeError> {
    check_family(taus)?;
    let flat: Vec<Vec<f64>> = taus.iter().map(|t| to_f64(&t.delta)).collect();
    let d = flat[0].len();
    if signs.len() != d {
        return Err(MergeError::SignLength {
            expected: d,
            got: signs.len(),
        });
    }
    let (merged, _) = disjoint_mean_flat(&flat, signs);
    Ok(TaskVector {
        base_fingerprint: taus[0].base_fingerprint,
        delta: from_f64(&taus[0].delta, &merged)?,
        rank_info: None,
    })
}

fn canonical_cmp(a: &ParamSet, b: &ParamSet) -> Ordering {
    a.checksum().cmp(&b.checksum()).then_with(|| {
        let fa = a.flatten();
        let fb = b.flatten();
        fa.iter()
            .map(|v| v.to_bits())
            .cmp(fb.iter().map(|v| v.to_bits()))
    })
}

/// Merges `models` (each derived from `theta_init`) into one parameter set.
///
/// Task vectors are formed, trimmed, sign-elected and disjoint-averaged in
/// `f64`; the result is rounded to `f32` once, after adding back to the base.
pub fn ties(
    theta_init: &ParamSet,
    models: &[ParamSet],
    spec: &MergeSpec,
) -> Result<(ParamSet, MergeTrace), MergeError> {
    spec.validate()?;
    if models.is_empty() {
        return Err(MergeError::NoModels);
    }
    for m in models {
        theta_init.check_compatible(m)?;
    }

    let mut model_order: Vec<usize> = (0..models.len()).collect();
    model_order.sort_by(|&i, &j| canonical_cmp(&models[i], &models[j]).then(i.cmp(&j)));

    let base = to_f64(theta_init);
    let segs = segments(theta_init);
    let mut kept_counts = Vec::with_capacity(models.len());
    let mut trimmed = Vec::with_capacity(models.len());
    for &i in &model_order {
        let mut tau: Vec<f64> = to_f64(&models[i])
            .iter()
            .zip(&base)
            .map(|(m, b)| m - b)
            .collect();
        kept_counts.push(trim_flat(&mut tau, &segs, spec));
        trimmed.push(tau);
    }

    let elected_signs = elect_flat(&trimmed);
    let (merged, agreement_set_sizes) = disjoint_mean_flat(&trimmed, &elected_signs);
    let out: Vec<f64> = base
        .iter()
        .zip(&merged)
        .map(|(b, t)| b + spec.lambda * t)
        .collect();

    let magnitudes = trimmed
        .iter()
        .map(|t| t.iter().map(|v| v.abs() as f32).collect())
        .collect();
    let trace = MergeTrace {
        spec: *spec,
        model_order,
        kept_counts,
        elected_signs,
        agreement_set_sizes,
        magnitudes,
    };
    Ok((from_f64(theta_init, &out)?, trace))
}
