//! Losses and their gradients by manual backpropagation.

use super::model::{ForwardTrace, Model};
use super::NeuralError;

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Next-token cross-entropy, averaged over the positions of each sequence
    /// and then over the batch.
    NextToken,
    /// Mean squared distance of layer `layer` activations from `target`
    /// (the scaled random direction).
    RmuForget {
        layer: usize,
        target: &'a [f64],
        trainable: &'a [usize],
    },
    /// Mean squared distance of layer `layer` activations from those of
    /// `anchor` on the same tokens.
    RmuRetain {
        layer: usize,
        anchor: &'a Model,
        trainable: &'a [usize],
    },
    /// Forget loss on the batch plus `alpha` times the retain loss on `retain`.
    RmuCombined {
        layer: usize,
        target: &'a [f64],
        anchor: &'a Model,
        alpha: f64,
        retain: &'a [Vec<u32>],
        trainable: &'a [usize],
    },
}

/// Upstream gradients fed into [`backward`].
struct Upstream<'a> {
    logits: Option<&'a [f64]>,
    hidden: Option<(usize, &'a [f64])>,
}

/// Accumulates parameter gradients for one sequence into `grads`.
fn backward(model: &Model, tokens: &[u32], trace: &ForwardTrace, up: Upstream<'_>, grads: &mut [f64]) {
    let s = model.spec();
    let lay = model.layout();
    let p = model.params();
    let (h, v, e) = (s.hidden_dim, s.vocab_size, s.embed_dim);
    let t_len = trace.seq_len;

    let top = match (up.logits, up.hidden) {
        (Some(_), _) => s.num_layers - 1,
        (None, Some((l, _))) => l,
        (None, None) => return,
    };

    // dL/dh for the current layer, all positions.
    let mut d_h = vec![0.0; t_len * h];
    if let Some(d_logits) = up.logits {
        let hw = &p[lay.head_w..lay.head_w + v * h];
        let h_top = &trace.hidden[s.num_layers - 1];
        for pos in 0..t_len {
            let dl = &d_logits[pos * v..(pos + 1) * v];
            let hx = &h_top[pos * h..(pos + 1) * h];
            let dh = &mut d_h[pos * h..(pos + 1) * h];
            for (k, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grads[lay.head_b + k] += g;
                let gw = &mut grads[lay.head_w + k * h..lay.head_w + (k + 1) * h];
                for ((gwj, &xj), (dhj, &wj)) in gw.iter_mut().zip(hx).zip(dh.iter_mut().zip(&hw[k * h..(k + 1) * h])) {
                    *gwj += g * xj;
                    *dhj += g * wj;
                }
            }
        }
    }

    let mut d_input = vec![0.0; t_len * s.input_dim()];
    for l in (0..=top).rev() {
        if let Some((inj_layer, inj)) = up.hidden {
            if inj_layer == l {
                d_h.iter_mut().zip(inj).for_each(|(a, b)| *a += b);
            }
        }
        let in_dim = s.layer_in_dim(l);
        let w = &p[lay.layer_w[l]..lay.layer_w[l] + h * in_dim];
        let act = &trace.hidden[l];
        let mut d_below = vec![0.0; t_len * in_dim];
        for pos in 0..t_len {
            let x = if l == 0 {
                &trace.input[pos * in_dim..(pos + 1) * in_dim]
            } else {
                &trace.hidden[l - 1][pos * in_dim..(pos + 1) * in_dim]
            };
            let db = &mut d_below[pos * in_dim..(pos + 1) * in_dim];
            for i in 0..h {
                let a = act[pos * h + i];
                let dz = d_h[pos * h + i] * (1.0 - a * a);
                if dz == 0.0 {
                    continue;
                }
                grads[lay.layer_b[l] + i] += dz;
                let gw = &mut grads[lay.layer_w[l] + i * in_dim..lay.layer_w[l] + (i + 1) * in_dim];
                let wr = &w[i * in_dim..(i + 1) * in_dim];
                for j in 0..in_dim {
                    gw[j] += dz * x[j];
                    db[j] += dz * wr[j];
                }
            }
        }
        if l == 0 {
            d_input = d_below;
        } else {
            d_h = d_below;
        }
    }

    let din = s.input_dim();
    for pos in 0..t_len {
        let di = &d_input[pos * din..(pos + 1) * din];
        let cur = lay.embed + tokens[pos] as usize * e;
        for j in 0..e {
            grads[cur + j] += di[j];
        }
        let prev = if pos == 0 {
            lay.start
        } else {
            lay.embed + tokens[pos - 1] as usize * e
        };
        for j in 0..e {
            grads[prev + j] += di[e + j];
        }
    }
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Mean next-token cross-entropy of one sequence and, optionally, its
/// gradient with weight `scale`.
fn ce_sequence(model: &Model, tokens: &[u32], scale: f64, grads: Option<&mut [f64]>) -> Result<f64, NeuralError> {
    let trace = model.forward(tokens)?;
    let v = model.spec().vocab_size;
    let targets = tokens.len() - 1;
    let mut loss = 0.0;
    let mut d_logits = vec![0.0; tokens.len() * v];
    let mut logp = vec![0.0; v];
    for pos in 0..targets {
        log_softmax_into(trace.logits_at(pos), &mut logp);
        let target = tokens[pos + 1] as usize;
        loss -= logp[target];
        let dl = &mut d_logits[pos * v..(pos + 1) * v];
        for (d, lp) in dl.iter_mut().zip(&logp) {
            *d = lp.exp() * scale / targets as f64;
        }
        dl[target] -= scale / targets as f64;
    }
    if let Some(g) = grads {
        backward(
            model,
            tokens,
            &trace,
            Upstream { logits: Some(&d_logits), hidden: None },
            g,
        );
    }
    Ok(loss / targets as f64)
}

/// `(1/T) Σ_t ||h_layer(t) - reference(t)||²` for one sequence, where
/// `reference` yields the target activation at each position.
fn activation_sequence<'r>(
    model: &Model,
    tokens: &[u32],
    layer: usize,
    reference: impl Fn(usize) -> &'r [f64],
    scale: f64,
    grads: Option<&mut [f64]>,
) -> Result<f64, NeuralError> {
    let trace = model.forward_to(tokens, layer + 1, false)?;
    let h = model.spec().hidden_dim;
    let t_len = tokens.len() as f64;
    let mut loss = 0.0;
    let mut inj = vec![0.0; tokens.len() * h];
    for pos in 0..tokens.len() {
        let target = reference(pos);
        for (i, (&a, &r)) in trace.hidden_at(layer, pos).iter().zip(target).enumerate() {
            let diff = a - r;
            loss += diff * diff;
            inj[pos * h + i] = 2.0 * diff * scale / t_len;
        }
    }
    if let Some(g) = grads {
        backward(
            model,
            tokens,
            &trace,
            Upstream { logits: None, hidden: Some((layer, &inj)) },
            g,
        );
    }
    Ok(loss / t_len)
}

fn check_layer(model: &Model, layer: usize, trainable: &[usize]) -> Result<(), NeuralError> {
    let l = model.spec().num_layers;
    if layer >= l {
        return Err(NeuralError::InvalidSpec(format!("layer {layer} out of range for {l} layers")));
    }
    if let Some(bad) = trainable.iter().find(|&&t| t >= l) {
        return Err(NeuralError::InvalidSpec(format!("trainable layer {bad} out of range for {l} layers")));
    }
    Ok(())
}

fn forget_loss(
    model: &Model,
    batch: &[Vec<u32>],
    layer: usize,
    target: &[f64],
    weight: f64,
    mut grads: Option<&mut [f64]>,
) -> Result<f64, NeuralError> {
    if target.len() != model.spec().hidden_dim {
        return Err(NeuralError::InvalidSpec(format!(
            "forget target has {} entries, hidden width is {}",
            target.len(),
            model.spec().hidden_dim
        )));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for seq in batch {
        total += activation_sequence(model, seq, layer, |_| target, weight / n, grads.as_deref_mut())?;
    }
    Ok(total / n)
}

fn retain_loss(
    model: &Model,
    batch: &[Vec<u32>],
    layer: usize,
    anchor: &Model,
    weight: f64,
    mut grads: Option<&mut [f64]>,
) -> Result<f64, NeuralError> {
    if anchor.spec() != model.spec() {
        return Err(NeuralError::InvalidSpec("anchor model has a different architecture".into()));
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    for seq in batch {
        let reference = anchor.forward_to(seq, layer + 1, false)?;
        total += activation_sequence(
            model,
            seq,
            layer,
            |pos| reference.hidden_at(layer, pos),
            weight / n,
            grads.as_deref_mut(),
        )?;
    }
    Ok(total / n)
}

/// Zeroes every gradient outside the weights and biases of `trainable` layers.
fn mask_to_layers(model: &Model, trainable: &[usize], grads: &mut [f64]) {
    let s = model.spec();
    let lay = model.layout();
    let mut keep = vec![false; grads.len()];
    for &l in trainable {
        let w = s.hidden_dim * s.layer_in_dim(l);
        keep[lay.layer_w[l]..lay.layer_w[l] + w].iter_mut().for_each(|k| *k = true);
        keep[lay.layer_b[l]..lay.layer_b[l] + s.hidden_dim].iter_mut().for_each(|k| *k = true);
    }
    for (g, k) in grads.iter_mut().zip(keep) {
        if !k {
            *g = 0.0;
        }
    }
}

fn evaluate(model: &Model, batch: &[Vec<u32>], loss: &LossSpec<'_>, mut grads: Option<&mut [f64]>) -> Result<f64, NeuralError> {
    if batch.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    let value = match *loss {
        LossSpec::NextToken => {
            let usable: Vec<&Vec<u32>> = batch.iter().filter(|s| s.len() >= 2).collect();
            if usable.is_empty() {
                return Err(NeuralError::EmptyBatch);
            }
            let n = usable.len() as f64;
            let mut total = 0.0;
            for seq in usable {
                total += ce_sequence(model, seq, 1.0 / n, grads.as_deref_mut())?;
            }
            total / n
        }
        LossSpec::RmuForget { layer, target, trainable } => {
            check_layer(model, layer, trainable)?;
            forget_loss(model, batch, layer, target, 1.0, grads.as_deref_mut())?
        }
        LossSpec::RmuRetain { layer, anchor, trainable } => {
            check_layer(model, layer, trainable)?;
            retain_loss(model, batch, layer, anchor, 1.0, grads.as_deref_mut())?
        }
        LossSpec::RmuCombined { layer, target, anchor, alpha, retain, trainable } => {
            check_layer(model, layer, trainable)?;
            if retain.is_empty() {
                return Err(NeuralError::EmptyBatch);
            }
            let lu = forget_loss(model, batch, layer, target, 1.0, grads.as_deref_mut())?;
            let lr = retain_loss(model, retain, layer, anchor, alpha, grads.as_deref_mut())?;
            lu + alpha * lr
        }
    };
    if let (Some(g), LossSpec::RmuForget { trainable, .. } | LossSpec::RmuRetain { trainable, .. } | LossSpec::RmuCombined { trainable, .. }) =
        (grads, loss)
    {
        mask_to_layers(model, trainable, g);
    }
    if !value.is_finite() {
        return Err(NeuralError::NonFiniteLoss(value));
    }
    Ok(value)
}

/// Mean loss over `batch` and its gradient, laid out like
/// [`Model::params`]. RMU objectives return zero gradient outside the
/// trainable layers.
pub fn loss_and_grads(model: &Model, batch: &[Vec<u32>], loss: &LossSpec<'_>) -> Result<(f64, Vec<f64>), NeuralError> {
    let mut grads = vec![0.0; model.params().len()];
    let value = evaluate(model, batch, loss, Some(&mut grads))?;
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NeuralError::NonFiniteLoss(f64::NAN));
    }
    Ok((value, grads))
}

/// Loss value only.
pub fn loss_value(model: &Model, batch: &[Vec<u32>], loss: &LossSpec<'_>) -> Result<f64, NeuralError> {
    evaluate(model, batch, loss, None)
}
