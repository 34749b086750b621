//! Low-rank adapters: a frozen weight `W` is used as `W + B·A` with trainable
//! `A: r×in` (seeded random) and `B: out×r` (zero at attach time).

use std::collections::BTreeMap;

use crate::param_store::{ParamSet, StoreError};
use crate::rng::SplitMix64;
use crate::task_arith::{self, low_rank_product, LowRankFactors, TaskVector};

use super::model::Model;
use super::NeuralError;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub rank: usize,
    /// Target name → factors, in name order.
    pub factors: BTreeMap<String, LowRankFactors>,
}

struct Target {
    offset: usize,
    rows: usize,
    cols: usize,
}

fn target_geometry(model: &Model, name: &str) -> Result<Target, NeuralError> {
    let lay = model.layout();
    let shape = lay
        .shape(name)
        .ok_or_else(|| NeuralError::UnknownTarget(name.to_string()))?;
    let &[rows, cols] = shape else {
        return Err(NeuralError::UnknownTarget(format!("{name} is not a matrix")));
    };
    let (offset, _) = lay.range(name).expect("shape found");
    Ok(Target { offset, rows, cols })
}

pub fn attach_adapter(model: &Model, rank: usize, targets: &[String], seed: u64) -> Result<AdapterState, NeuralError> {
    if rank == 0 {
        return Err(NeuralError::InvalidSpec("adapter rank must be >= 1".into()));
    }
    let mut factors = BTreeMap::new();
    for name in targets {
        let g = target_geometry(model, name)?;
        let mut rng = SplitMix64::from_label(seed, &format!("adapter/{name}"));
        let scale = 1.0 / (g.cols as f64).sqrt();
        let a = (0..rank * g.cols).map(|_| rng.next_signed() * scale).collect();
        factors.insert(
            name.clone(),
            LowRankFactors {
                a,
                b: vec![0.0; g.rows * rank],
                rank,
            },
        );
    }
    Ok(AdapterState { rank, factors })
}

impl AdapterState {
    /// The base model with every target replaced by `W + B·A`.
    pub fn effective(&self, base: &Model) -> Result<Model, NeuralError> {
        let mut params = base.params().to_vec();
        for (name, f) in &self.factors {
            let g = target_geometry(base, name)?;
            let delta = low_rank_product(&f.b, &f.a, g.rows, f.rank, g.cols);
            for (p, d) in params[g.offset..g.offset + g.rows * g.cols].iter_mut().zip(delta) {
                *p += d;
            }
        }
        Model::from_flat(*base.spec(), params)
    }

    pub fn num_params(&self) -> usize {
        self.factors.values().map(|f| f.a.len() + f.b.len()).sum()
    }

    /// Factors flattened as `A` then `B` per target, in name order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for f in self.factors.values() {
            out.extend_from_slice(&f.a);
            out.extend_from_slice(&f.b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "adapter flat length");
        let mut i = 0;
        for f in self.factors.values_mut() {
            let na = f.a.len();
            f.a.copy_from_slice(&flat[i..i + na]);
            i += na;
            let nb = f.b.len();
            f.b.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
    }

    /// Chain rule from gradients w.r.t. the effective weights to the factors:
    /// `dA = Bᵀ·dW`, `dB = dW·Aᵀ`. Laid out like [`AdapterState::flat`].
    pub fn factor_grads(&self, base: &Model, full_grads: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let mut out = Vec::with_capacity(self.num_params());
        for (name, f) in &self.factors {
            let g = target_geometry(base, name)?;
            let dw = &full_grads[g.offset..g.offset + g.rows * g.cols];
            let r = f.rank;
            let mut da = vec![0.0; r * g.cols];
            let mut db = vec![0.0; g.rows * r];
            for i in 0..g.rows {
                let dw_row = &dw[i * g.cols..(i + 1) * g.cols];
                for k in 0..r {
                    let bik = f.b[i * r + k];
                    let a_row = &f.a[k * g.cols..(k + 1) * g.cols];
                    let mut acc = 0.0;
                    for j in 0..g.cols {
                        da[k * g.cols + j] += bik * dw_row[j];
                        acc += dw_row[j] * a_row[j];
                    }
                    db[i * r + k] = acc;
                }
            }
            out.extend(da);
            out.extend(db);
        }
        Ok(out)
    }

    /// The adapter's dense task vector over `base`.
    pub fn task_vector(&self, base: &ParamSet) -> Result<TaskVector, StoreError> {
        task_arith::expand_low_rank(base, &self.factors)
    }
}
