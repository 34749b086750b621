#![allow(dead_code)]

use std::path::{Path, PathBuf};

use spunge::neural::{attach_adapter, loss_and_grads, loss_value, LossSpec, Model, ModelSpec};
use spunge::param_store::ParamSet;
use spunge::rng::SplitMix64;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// TIES written out loop by loop, independent of the library's code path.
/// Works on the name-ordered flat view; `per_entry` trims each entry on its own.
pub fn ties_reference(init: &ParamSet, models: &[ParamSet], k: f64, lambda: f64, per_entry: bool) -> Vec<f32> {
    let base: Vec<f64> = init.flatten().iter().map(|&x| x as f64).collect();
    let d = base.len();
    let mut bounds = Vec::new();
    if per_entry {
        let mut start = 0;
        for (_, t) in init.iter() {
            bounds.push((start, start + t.len()));
            start += t.len();
        }
    } else {
        bounds.push((0, d));
    }

    let mut trimmed: Vec<Vec<f64>> = Vec::new();
    for m in models {
        let flat = m.flatten();
        let mut tau = vec![0.0f64; d];
        for i in 0..d {
            tau[i] = flat[i] as f64 - base[i];
        }
        let mut out = vec![0.0f64; d];
        for &(lo, hi) in &bounds {
            let n = hi - lo;
            let keep = ((k * n as f64).ceil() as usize).min(n);
            // Selection by repeated scan: the largest remaining magnitude,
            // lowest index on ties.
            let mut taken = vec![false; n];
            for _ in 0..keep {
                let mut best: Option<usize> = None;
                for j in 0..n {
                    if taken[j] {
                        continue;
                    }
                    match best {
                        None => best = Some(j),
                        Some(b) => {
                            if tau[lo + j].abs() > tau[lo + b].abs() {
                                best = Some(j);
                            }
                        }
                    }
                }
                let b = best.unwrap();
                taken[b] = true;
                out[lo + b] = tau[lo + b];
            }
        }
        trimmed.push(out);
    }

    let mut result = vec![0.0f32; d];
    for i in 0..d {
        let mut total = 0.0;
        for t in &trimmed {
            total += t[i];
        }
        let s = if total > 0.0 {
            1.0
        } else if total < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut sum = 0.0;
        let mut count = 0;
        for t in &trimmed {
            if s != 0.0 && t[i] != 0.0 && (t[i] > 0.0) == (s > 0.0) {
                sum += t[i];
                count += 1;
            }
        }
        let merged = if count > 0 { sum / count as f64 } else { 0.0 };
        result[i] = (base[i] + lambda * merged) as f32;
    }
    result
}

/// Random two-entry parameter sets sharing one layout.
pub fn random_sets(rng: &mut SplitMix64, n: usize, d1: usize, d2: usize) -> (ParamSet, Vec<ParamSet>) {
    let make = |rng: &mut SplitMix64| {
        let mut draw = |len: usize| -> Vec<f32> {
            (0..len)
                .map(|_| {
                    // Some exact zeros and repeats so ties and cancellations occur.
                    match rng.below(8) {
                        0 => 0.0,
                        1 => 0.5,
                        _ => rng.next_signed() as f32,
                    }
                })
                .collect()
        };
        ParamSet::from_entries(vec![
            ("a".to_string(), vec![d1], draw(d1)),
            ("b".to_string(), vec![d2], draw(d2)),
        ])
        .unwrap()
    };
    let init = make(rng);
    let models = (0..n).map(|_| make(rng)).collect();
    (init, models)
}

pub fn tiny_spec() -> ModelSpec {
    ModelSpec { vocab_size: 8, embed_dim: 4, num_layers: 3, hidden_dim: 6, seed: 11 }
}

pub fn tiny_batch() -> Vec<Vec<u32>> {
    vec![vec![1, 5, 2, 7, 3, 0], vec![4, 4, 6], vec![2, 3, 1, 6, 5]]
}

/// Perturbs every parameter slightly so the anchor differs from the model.
pub fn perturbed(model: &Model, seed: u64, scale: f64) -> Model {
    let mut rng = SplitMix64::new(seed);
    let p: Vec<f64> = model.params().iter().map(|x| x + scale * rng.next_signed()).collect();
    Model::from_flat(*model.spec(), p).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative error; components whose true gradient is
/// this small are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// Largest relative error between analytic gradients and central differences
/// over the components selected by `check`.
pub fn fd_max_rel_err(
    params: &[f64],
    analytic: &[f64],
    check: impl Fn(usize) -> bool,
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..params.len() {
        if !check(i) {
            continue;
        }
        p[i] = params[i] + FD_STEP;
        let up = f(&p);
        p[i] = params[i] - FD_STEP;
        let down = f(&p);
        p[i] = params[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric, FD_FLOOR));
    }
    worst
}

/// Worst relative error for one loss, plus whether every masked component is
/// exactly zero.
pub fn check_loss(model: &Model, batch: &[Vec<u32>], spec: &LossSpec<'_>, trainable: Option<&[usize]>) -> (f64, bool) {
    let (_, grads) = loss_and_grads(model, batch, spec).unwrap();
    let lay = model.layout();
    let s = *model.spec();
    let in_trainable = |i: usize| match trainable {
        None => true,
        Some(ls) => ls.iter().any(|&l| {
            let w = s.hidden_dim * s.layer_in_dim(l);
            (lay.layer_w[l]..lay.layer_w[l] + w).contains(&i) || (lay.layer_b[l]..lay.layer_b[l] + s.hidden_dim).contains(&i)
        }),
    };
    let masked_zero = (0..grads.len()).filter(|&i| !in_trainable(i)).all(|i| grads[i] == 0.0);
    let err = fd_max_rel_err(model.params(), &grads, in_trainable, |p| {
        loss_value(&Model::from_flat(s, p.to_vec()).unwrap(), batch, spec).unwrap()
    });
    (err, masked_zero)
}

/// Finite-difference check of the adapter factor gradients under CE.
pub fn check_adapter(model: &Model, batch: &[Vec<u32>], rank: usize) -> f64 {
    let targets = vec!["layer_1.weight".to_string(), "head.weight".to_string()];
    let mut adapter = attach_adapter(model, rank, &targets, 5).unwrap();
    // Nonzero B so both factors carry gradient.
    let mut rng = SplitMix64::new(17);
    let flat: Vec<f64> = adapter.flat().iter().map(|x| x + 0.3 * rng.next_signed()).collect();
    adapter.set_flat(&flat);
    let eff = adapter.effective(model).unwrap();
    let (_, full) = loss_and_grads(&eff, batch, &LossSpec::NextToken).unwrap();
    let analytic = adapter.factor_grads(model, &full).unwrap();
    let probe = std::cell::RefCell::new(adapter.clone());
    fd_max_rel_err(&flat, &analytic, |_| true, |p| {
        let mut a = probe.borrow_mut();
        a.set_flat(p);
        loss_value(&a.effective(model).unwrap(), batch, &LossSpec::NextToken).unwrap()
    })
}

/// Named gradient checks over every loss kind on the tiny fixture model.
pub fn gradient_report() -> Vec<(&'static str, f64, bool)> {
    let model = perturbed(&Model::init(tiny_spec()).unwrap(), 3, 0.2);
    let anchor = perturbed(&model, 9, 0.3);
    let batch = tiny_batch();
    let retain = vec![vec![3, 1, 4, 1, 5], vec![6, 2, 6]];
    let target: Vec<f64> = (0..tiny_spec().hidden_dim).map(|i| 0.4 * (i as f64 - 2.0)).collect();
    let all = [0usize, 1, 2];
    let part = [0usize, 1];
    let mut out = Vec::new();
    let (e, z) = check_loss(&model, &batch, &LossSpec::NextToken, None);
    out.push(("cross-entropy", e, z));
    let (e, z) = check_loss(&model, &batch, &LossSpec::RmuForget { layer: 1, target: &target, trainable: &all }, Some(&all));
    out.push(("rmu forget", e, z));
    let (e, z) = check_loss(&model, &batch, &LossSpec::RmuRetain { layer: 2, anchor: &anchor, trainable: &all }, Some(&all));
    out.push(("rmu retain", e, z));
    let spec = LossSpec::RmuCombined { layer: 1, target: &target, anchor: &anchor, alpha: 3.0, retain: &retain, trainable: &part };
    let (e, z) = check_loss(&model, &batch, &spec, Some(&part));
    out.push(("rmu combined", e, z));
    out.push(("adapter factors", check_adapter(&model, &batch, 2), true));
    out
}
