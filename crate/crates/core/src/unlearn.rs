//! Unlearning methods: task-vector negation (TVN) and representation
//! misdirection (RMU).
//!
//! TVN fine-tunes a copy of the base on the forget set (all weights, or a
//! low-rank adapter), takes the task vector `θ_ft − θ_init`, and returns
//! `θ_init − λτ`.
//!
//! RMU samples one random direction `u` per run and trains the selected layers
//! so that layer-ℓ activations on forget tokens move toward `c·u` while
//! activations on retain tokens stay at the base model's:
//! `L = L_u + α·L_r`. Each step pairs one forget batch with one retain batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::neural::{self, attach_adapter, loss_and_grads, AdamState, LossSpec, Model, NeuralError};
use crate::param_store::StoreError;
use crate::rng::SplitMix64;
use crate::task_arith::{self, NegationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Tvn,
    Rmu,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tvn" => Ok(Self::Tvn),
            "rmu" => Ok(Self::Rmu),
            other => Err(format!("unknown method {other:?} (expected tvn|rmu)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    /// TVN negation scale.
    pub lambda: f64,
    /// TVN: fine-tune a low-rank adapter instead of all weights.
    pub use_adapter: bool,
    pub adapter_rank: usize,
    /// Adapter targets; every layer weight plus the head when empty.
    pub adapter_targets: Vec<String>,
    /// RMU steering magnitude.
    pub c: f64,
    /// RMU retain-loss weight.
    pub alpha: f64,
    /// RMU activation layer ℓ.
    pub layer: usize,
    /// RMU layers that receive updates; `{ℓ-2, ℓ-1, ℓ}` clipped at 0 when absent.
    pub trainable_layers: Option<Vec<usize>>,
    /// RMU: L2-normalize `u` after drawing its entries from `[0, 1)`.
    pub normalize_u: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// RMU stops once the forget-probe cosine similarity falls below this.
    pub early_stop_cosine: f64,
    /// Sequences in the early-stop probe.
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            method: Method::Tvn,
            lambda: 1.0,
            use_adapter: false,
            adapter_rank: 4,
            adapter_targets: Vec::new(),
            c: 2.0,
            alpha: 10.0,
            layer: 1,
            trainable_layers: None,
            normalize_u: true,
            lr: 1e-3,
            batch_size: 16,
            epochs: 1,
            early_stop_cosine: 0.5,
            probe_size: 32,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn trainable(&self) -> Vec<usize> {
        self.trainable_layers.clone().unwrap_or_else(|| {
            (self.layer.saturating_sub(2)..=self.layer).collect()
        })
    }

    pub fn validate(&self, num_layers: usize) -> Result<(), UnlearnError> {
        let bad = |m: String| Err(UnlearnError::InvalidConfig(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.c > 0.0) {
            return bad(format!("c must be > 0, got {}", self.c));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.early_stop_cosine) {
            return bad(format!("early_stop_cosine must be in [0, 1], got {}", self.early_stop_cosine));
        }
        if self.layer >= num_layers {
            return bad(format!("layer {} out of range for {num_layers} layers", self.layer));
        }
        if let Some(l) = self.trainable().iter().find(|&&l| l >= num_layers) {
            return bad(format!("trainable layer {l} out of range"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.use_adapter && self.adapter_rank == 0 {
            return bad("adapter_rank must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UnlearnError {
    #[error("invalid unlearning config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} set")]
    EmptyDataset(&'static str),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochsExhausted,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: UnlearnConfig,
    pub steps: usize,
    /// Training loss after each step's forward pass.
    pub losses: Vec<f64>,
    /// RMU: forget-probe cosine similarity after each step.
    pub probe_cosines: Vec<f64>,
    pub stop_reason: StopReason,
    pub wall_time_secs: f64,
}

fn sequences(data: &[Sample]) -> Vec<Vec<u32>> {
    data.iter().map(|s| s.tokens.clone()).collect()
}

/// Batches of `seqs` for one epoch, in an order drawn from `rng`.
pub(crate) fn epoch_batches(seqs: &[Vec<u32>], batch_size: usize, rng: &mut SplitMix64) -> Vec<Vec<Vec<u32>>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| seqs[i].clone()).collect())
        .collect()
}

fn default_adapter_targets(model: &Model) -> Vec<String> {
    let mut t: Vec<String> = (0..model.spec().num_layers).map(neural::model::layer_weight_name).collect();
    t.push(neural::model::HEAD_WEIGHT.to_string());
    t
}

/// Fine-tunes on `forget` with next-token cross-entropy, then negates the task
/// vector.
pub fn tvn_unlearn(theta_init: &Model, forget: &[Sample], cfg: &UnlearnConfig) -> Result<(Model, RunRecord), UnlearnError> {
    cfg.validate(theta_init.spec().num_layers)?;
    let seqs: Vec<Vec<u32>> = sequences(forget).into_iter().filter(|s| s.len() >= 2).collect();
    if seqs.is_empty() {
        return Err(UnlearnError::EmptyDataset("forget"));
    }
    let started = Instant::now();
    let init_params = theta_init.to_params();
    let mut rng = SplitMix64::from_label(cfg.seed, "tvn/shuffle");
    let mut losses = Vec::new();

    let tau = if cfg.use_adapter {
        let targets = if cfg.adapter_targets.is_empty() {
            default_adapter_targets(theta_init)
        } else {
            cfg.adapter_targets.clone()
        };
        let mut adapter = attach_adapter(theta_init, cfg.adapter_rank, &targets, crate::rng::sub_seed(cfg.seed, "tvn/adapter"))?;
        let mut flat = adapter.flat();
        let mut opt = AdamState::new(flat.len());
        for _ in 0..cfg.epochs {
            for batch in epoch_batches(&seqs, cfg.batch_size, &mut rng) {
                let eff = adapter.effective(theta_init)?;
                let (loss, grads) = loss_and_grads(&eff, &batch, &LossSpec::NextToken)?;
                let fg = adapter.factor_grads(theta_init, &grads)?;
                opt.step(&mut flat, &fg, cfg.lr);
                adapter.set_flat(&flat);
                losses.push(loss);
            }
        }
        adapter.task_vector(&init_params)?
    } else {
        let mut model = theta_init.clone();
        let mut opt = AdamState::new(model.params().len());
        for _ in 0..cfg.epochs {
            for batch in epoch_batches(&seqs, cfg.batch_size, &mut rng) {
                let (loss, grads) = loss_and_grads(&model, &batch, &LossSpec::NextToken)?;
                opt.step(model.params_mut(), &grads, cfg.lr);
                losses.push(loss);
            }
        }
        task_arith::task_vector(&init_params, &model.to_params())?
    };

    let negated = task_arith::apply_negation(&init_params, &tau, NegationSpec::new(cfg.lambda)?)?;
    let out = Model::from_params(*theta_init.spec(), &negated)?;
    let record = RunRecord {
        config: cfg.clone(),
        steps: losses.len(),
        losses,
        probe_cosines: Vec::new(),
        stop_reason: StopReason::EpochsExhausted,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((out, record))
}

/// The RMU direction `u` for a run: entries uniform in `[0, 1)`, optionally
/// L2-normalized.
pub fn rmu_direction(dim: usize, seed: u64, normalize: bool) -> Vec<f64> {
    let mut rng = SplitMix64::from_label(seed, "rmu/u");
    let mut u: Vec<f64> = (0..dim).map(|_| rng.next_f64()).collect();
    if normalize {
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            u.iter_mut().for_each(|x| *x /= norm);
        }
    }
    u
}

/// Mean over all probe tokens of `cos(f_θ(t), f_θinit(t))` at `layer`. A
/// token where either activation has zero norm contributes 0.
pub fn cosine_probe(theta: &Model, theta_init: &Model, probe: &[Vec<u32>], layer: usize) -> Result<f64, UnlearnError> {
    if theta.spec() != theta_init.spec() {
        return Err(UnlearnError::InvalidConfig("probe models differ in architecture".into()));
    }
    if layer >= theta.spec().num_layers {
        return Err(UnlearnError::InvalidConfig(format!("layer {layer} out of range")));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in probe {
        let a = theta.forward_to(seq, layer + 1, false)?;
        let b = theta_init.forward_to(seq, layer + 1, false)?;
        for pos in 0..seq.len() {
            total += cosine(a.hidden_at(layer, pos), b.hidden_at(layer, pos));
            count += 1;
        }
    }
    if count == 0 {
        return Err(UnlearnError::EmptyDataset("probe"));
    }
    Ok(total / count as f64)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn rmu_unlearn(
    theta_init: &Model,
    forget: &[Sample],
    retain: &[Sample],
    cfg: &UnlearnConfig,
) -> Result<(Model, RunRecord), UnlearnError> {
    cfg.validate(theta_init.spec().num_layers)?;
    let forget_seqs = sequences(forget);
    let retain_seqs = sequences(retain);
    if forget_seqs.is_empty() {
        return Err(UnlearnError::EmptyDataset("forget"));
    }
    if retain_seqs.is_empty() {
        return Err(UnlearnError::EmptyDataset("retain"));
    }
    let started = Instant::now();
    let trainable = cfg.trainable();
    let target: Vec<f64> = rmu_direction(theta_init.spec().hidden_dim, cfg.seed, cfg.normalize_u)
        .into_iter()
        .map(|x| cfg.c * x)
        .collect();
    let probe: Vec<Vec<u32>> = forget_seqs.iter().take(cfg.probe_size.max(1)).cloned().collect();

    let mut model = theta_init.clone();
    let mut opt = AdamState::new(model.params().len());
    let mut forget_rng = SplitMix64::from_label(cfg.seed, "rmu/forget-order");
    let mut retain_rng = SplitMix64::from_label(cfg.seed, "rmu/retain-order");
    let mut retain_batches = epoch_batches(&retain_seqs, cfg.batch_size, &mut retain_rng).into_iter();

    let mut losses = Vec::new();
    let mut probe_cosines = Vec::new();
    let mut stop_reason = StopReason::EpochsExhausted;
    'epochs: for _ in 0..cfg.epochs {
        for batch in epoch_batches(&forget_seqs, cfg.batch_size, &mut forget_rng) {
            let retain_batch = match retain_batches.next() {
                Some(b) => b,
                None => {
                    retain_batches = epoch_batches(&retain_seqs, cfg.batch_size, &mut retain_rng).into_iter();
                    retain_batches.next().expect("retain set is nonempty")
                }
            };
            let spec = LossSpec::RmuCombined {
                layer: cfg.layer,
                target: &target,
                anchor: theta_init,
                alpha: cfg.alpha,
                retain: &retain_batch,
                trainable: &trainable,
            };
            let (loss, grads) = loss_and_grads(&model, &batch, &spec)?;
            opt.step(model.params_mut(), &grads, cfg.lr);
            losses.push(loss);

            let cos = cosine_probe(&model, theta_init, &probe, cfg.layer)?;
            probe_cosines.push(cos);
            if cos < cfg.early_stop_cosine {
                stop_reason = StopReason::EarlyStop;
                break 'epochs;
            }
        }
    }

    // Round through the f32 storage form so the returned model is exactly what
    // gets saved.
    let out = Model::from_params(*theta_init.spec(), &model.to_params())?;
    let record = RunRecord {
        config: cfg.clone(),
        steps: losses.len(),
        losses,
        probe_cosines,
        stop_reason,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((out, record))
}

/// Dispatches on `cfg.method`. `retain` is ignored by TVN.
pub fn unlearn(theta_init: &Model, forget: &[Sample], retain: &[Sample], cfg: &UnlearnConfig) -> Result<(Model, RunRecord), UnlearnError> {
    match cfg.method {
        Method::Tvn => tvn_unlearn(theta_init, forget, cfg),
        Method::Rmu => rmu_unlearn(theta_init, forget, retain, cfg),
    }
}
