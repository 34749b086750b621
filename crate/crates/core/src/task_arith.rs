//! Task vectors and their negation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::param_store::{self, ParamSet, StoreError, Tensor};

/// Factor shapes of a low-rank delta `B·A`, with `A: r×in` and `B: out×r`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: usize,
    pub a_shape: [usize; 2],
    pub b_shape: [usize; 2],
}

/// `theta_ft - theta_init`, bound to the checksum of the base it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub base_fingerprint: u64,
    pub delta: ParamSet,
    pub rank_info: Option<BTreeMap<String, RankInfo>>,
}

/// Scaling applied when subtracting a task vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegationSpec {
    pub lambda: f64,
}

impl Default for NegationSpec {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl NegationSpec {
    pub fn new(lambda: f64) -> Result<Self, StoreError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(StoreError::Incompatible(format!(
                "negation lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

/// A low-rank factor pair for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// `r × in`, row-major.
    pub a: Vec<f64>,
    /// `out × r`, row-major.
    pub b: Vec<f64>,
    pub rank: usize,
}

impl TaskVector {
    pub fn fingerprint_matches(&self, base: &ParamSet) -> bool {
        self.base_fingerprint == base.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut ext = Map::new();
        ext.insert("kind".into(), Value::from("task_vector"));
        ext.insert("base_fingerprint".into(), Value::from(self.base_fingerprint));
        if let Some(info) = &self.rank_info {
            ext.insert(
                "rank_info".into(),
                serde_json::to_value(info).expect("rank info serializes"),
            );
        }
        param_store::save_with(&self.delta, ext, path)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let (delta, ext) = param_store::load_with(path)?;
        if ext.get("kind").and_then(Value::as_str) != Some("task_vector") {
            return Err(StoreError::CorruptManifest(
                "container is not a task vector".into(),
            ));
        }
        let base_fingerprint = ext
            .get("base_fingerprint")
            .and_then(Value::as_u64)
            .ok_or_else(|| StoreError::CorruptManifest("missing base_fingerprint".into()))?;
        let rank_info = match ext.get("rank_info") {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| StoreError::CorruptManifest(format!("rank_info: {e}")))?,
            ),
            None => None,
        };
        Ok(Self {
            base_fingerprint,
            delta,
            rank_info,
        })
    }
}

pub fn task_vector(theta_init: &ParamSet, theta_ft: &ParamSet) -> Result<TaskVector, StoreError> {
    let delta = theta_ft.zip_map(theta_init, |ft, init| ft - init)?;
    Ok(TaskVector {
        base_fingerprint: theta_init.checksum(),
        delta,
        rank_info: None,
    })
}

/// `theta_init - lambda * tau`. Refuses a task vector taken from another base.
pub fn apply_negation(
    theta_init: &ParamSet,
    tau: &TaskVector,
    spec: NegationSpec,
) -> Result<ParamSet, StoreError> {
    if !tau.fingerprint_matches(theta_init) {
        return Err(StoreError::Incompatible(format!(
            "task vector was built against base {:#018x}, this base is {:#018x}",
            tau.base_fingerprint,
            theta_init.checksum()
        )));
    }
    theta_init.check_compatible(&tau.delta)?;
    if spec.lambda == 0.0 {
        return Ok(theta_init.clone());
    }
    param_store::axpy(-spec.lambda, &tau.delta, theta_init)
}

/// Expands per-matrix factors into a dense task vector over `base`.
/// Entries without factors get zero deltas.
pub fn expand_low_rank(
    base: &ParamSet,
    factors: &BTreeMap<String, LowRankFactors>,
) -> Result<TaskVector, StoreError> {
    let mut tensors = BTreeMap::new();
    let mut info = BTreeMap::new();
    for (name, t) in base.iter() {
        let Some(f) = factors.get(name) else {
            tensors.insert(name.to_string(), Tensor::zeros(t.shape().to_vec()));
            continue;
        };
        let &[rows, cols] = t.shape() else {
            return Err(StoreError::ShapeMismatch {
                name: name.to_string(),
                detail: format!("low-rank target must be a matrix, got {:?}", t.shape()),
            });
        };
        let r = f.rank;
        if r == 0 || f.a.len() != r * cols || f.b.len() != rows * r {
            return Err(StoreError::ShapeMismatch {
                name: name.to_string(),
                detail: format!(
                    "factors A({} values) B({} values) inconsistent with rank {r} and target {rows}x{cols}",
                    f.a.len(),
                    f.b.len()
                ),
            });
        }
        let dense = low_rank_product(&f.b, &f.a, rows, r, cols);
        tensors.insert(
            name.to_string(),
            Tensor::new(
                vec![rows, cols],
                dense.into_iter().map(|v| v as f32).collect(),
            )?,
        );
        info.insert(
            name.to_string(),
            RankInfo {
                rank: r,
                a_shape: [r, cols],
                b_shape: [rows, r],
            },
        );
    }
    if let Some(unknown) = factors.keys().find(|k| base.get(k).is_none()) {
        return Err(StoreError::Incompatible(format!(
            "factors given for unknown entry {unknown:?}"
        )));
    }
    Ok(TaskVector {
        base_fingerprint: base.checksum(),
        delta: ParamSet::from_tensors(tensors)?,
        rank_info: Some(info),
    })
}

/// `B·A` for `B: rows×r`, `A: r×cols`.
pub(crate) fn low_rank_product(b: &[f64], a: &[f64], rows: usize, r: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &mut out[i * cols..(i + 1) * cols];
        for k in 0..r {
            let bik = b[i * r + k];
            if bik == 0.0 {
                continue;
            }
            for (o, &akj) in row.iter_mut().zip(&a[k * cols..(k + 1) * cols]) {
                *o += bik * akj;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn set(name: &str, shape: &[usize], data: &[f32]) -> ParamSet {
        ParamSet::from_entries(vec![(name.to_string(), shape.to_vec(), data.to_vec())]).unwrap()
    }

    #[test]
    fn identical_models_give_zero_delta() {
        let a = set("w", &[3], &[1.0, -2.0, 0.5]);
        let tv = task_vector(&a, &a).unwrap();
        assert!(tv.delta.flatten().iter().all(|&v| v == 0.0));
        assert_eq!(tv.base_fingerprint, a.checksum());
    }

    #[test]
    fn small_task_vector() {
        let init = set("w", &[2], &[1.0, 1.0]);
        let ft = set("w", &[2], &[1.0, 2.0]);
        assert_eq!(task_vector(&init, &ft).unwrap().delta.flatten(), vec![0.0, 1.0]);
    }

    #[test]
    fn random_task_vector_matches_elementwise_difference() {
        let mut rng = SplitMix64::new(11);
        let a: Vec<f32> = (0..100).map(|_| rng.next_signed() as f32).collect();
        let b: Vec<f32> = (0..100).map(|_| rng.next_signed() as f32).collect();
        let init = set("w", &[10, 10], &a);
        let ft = set("w", &[10, 10], &b);
        let tv = task_vector(&init, &ft).unwrap();
        for ((d, x), y) in tv.delta.flatten().iter().zip(&a).zip(&b) {
            assert_eq!(*d, (f64::from(*y) - f64::from(*x)) as f32);
        }
    }

    #[test]
    fn negation_identities() {
        let init = set("w", &[3], &[1.0, -1.0, 0.25]);
        let ft = set("w", &[3], &[2.0, -3.0, 0.75]);
        let tau = task_vector(&init, &ft).unwrap();
        let zero = apply_negation(&init, &tau, NegationSpec::new(0.0).unwrap()).unwrap();
        assert!(zero.bits_eq(&init));
        let one = apply_negation(&init, &tau, NegationSpec::default()).unwrap();
        assert_eq!(one.flatten(), vec![0.0, 1.0, -0.25]);
        let via_axpy = param_store::axpy(-1.0, &tau.delta, &init).unwrap();
        assert!(one.bits_eq(&via_axpy));
    }

    #[test]
    fn negation_is_linear_in_lambda() {
        let mut rng = SplitMix64::new(5);
        let a: Vec<f32> = (0..20).map(|_| rng.next_signed() as f32).collect();
        let b: Vec<f32> = (0..20).map(|_| rng.next_signed() as f32).collect();
        let init = set("w", &[20], &a);
        let tau = task_vector(&init, &set("w", &[20], &b)).unwrap();
        let (l1, l2) = (0.7, 1.3);
        let sum = apply_negation(&init, &tau, NegationSpec::new(l1 + l2).unwrap()).unwrap();
        let first = apply_negation(&init, &tau, NegationSpec::new(l1).unwrap()).unwrap();
        let stepped = param_store::axpy(-l2, &tau.delta, &first).unwrap();
        assert!(sum.max_abs_diff(&stepped).unwrap() < 1e-6);
    }

    #[test]
    fn negation_rejects_foreign_base() {
        let init = set("w", &[2], &[1.0, 1.0]);
        let other = set("w", &[2], &[1.0, 1.5]);
        let tau = task_vector(&init, &other).unwrap();
        assert!(apply_negation(&other, &tau, NegationSpec::default()).is_err());
        assert!(NegationSpec::new(-0.1).is_err());
    }

    #[test]
    fn rank_one_outer_product() {
        let base = set("w", &[2, 2], &[0.0; 4]);
        let mut f = BTreeMap::new();
        f.insert(
            "w".to_string(),
            LowRankFactors {
                a: vec![1.0, 0.0],
                b: vec![2.0, 0.0],
                rank: 1,
            },
        );
        let tv = expand_low_rank(&base, &f).unwrap();
        assert_eq!(tv.delta.flatten(), vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(tv.rank_info.unwrap()["w"].rank, 1);
    }

    #[test]
    fn zero_factors_and_untouched_entries_are_zero() {
        let base = ParamSet::from_entries(vec![
            ("w".to_string(), vec![2, 3], vec![1.0; 6]),
            ("v".to_string(), vec![4], vec![1.0; 4]),
        ])
        .unwrap();
        let mut f = BTreeMap::new();
        f.insert(
            "w".to_string(),
            LowRankFactors {
                a: vec![0.0; 6],
                b: vec![0.0; 4],
                rank: 2,
            },
        );
        let tv = expand_low_rank(&base, &f).unwrap();
        assert!(tv.delta.flatten().iter().all(|&v| v == 0.0));
        assert!(!tv.rank_info.as_ref().unwrap().contains_key("v"));
    }

    #[test]
    fn random_rank_two_matches_triple_loop() {
        let mut rng = SplitMix64::new(77);
        let (rows, cols, r) = (4, 4, 2);
        let a: Vec<f64> = (0..r * cols).map(|_| rng.next_signed()).collect();
        let b: Vec<f64> = (0..rows * r).map(|_| rng.next_signed()).collect();
        let base = set("w", &[rows, cols], &[0.0; 16]);
        let mut f = BTreeMap::new();
        f.insert("w".to_string(), LowRankFactors { a: a.clone(), b: b.clone(), rank: r });
        let got = expand_low_rank(&base, &f).unwrap().delta.flatten();
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += b[i * r + k] * a[k * cols + j];
                }
                assert_eq!(got[i * cols + j], acc as f32);
            }
        }
    }

    #[test]
    fn inconsistent_factor_shapes_rejected() {
        let base = set("w", &[2, 2], &[0.0; 4]);
        let mut f = BTreeMap::new();
        f.insert(
            "w".to_string(),
            LowRankFactors { a: vec![1.0; 3], b: vec![1.0; 2], rank: 1 },
        );
        assert!(expand_low_rank(&base, &f).is_err());
        let mut g = BTreeMap::new();
        g.insert("nope".to_string(), LowRankFactors { a: vec![1.0; 2], b: vec![1.0; 2], rank: 1 });
        assert!(expand_low_rank(&base, &g).is_err());
    }

    #[test]
    fn task_vector_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = set("w", &[2, 2], &[0.5; 4]);
        let mut f = BTreeMap::new();
        f.insert("w".to_string(), LowRankFactors { a: vec![1.0, 2.0], b: vec![3.0, 4.0], rank: 1 });
        let tv = expand_low_rank(&base, &f).unwrap();
        let path = dir.path().join("tau.bin");
        tv.save(&path).unwrap();
        let back = TaskVector::load(&path).unwrap();
        assert_eq!(back, tv);
        param_store::save(&base, &path).unwrap();
        assert!(TaskVector::load(&path).is_err());
    }
}
