mod common;

use spunge::neural::{loss_and_grads, AdamState, LossSpec, Model, ModelSpec};
use spunge::rng::SplitMix64;

#[test]
fn every_loss_matches_central_differences() {
    for (name, err, masked_zero) in common::gradient_report() {
        assert!(err < 1e-4, "{name}: max relative error {err:e}");
        assert!(masked_zero, "{name}: gradient leaked outside trainable layers");
    }
}

#[test]
fn hidden_capture_matches_straight_line_evaluation() {
    let model = common::perturbed(&Model::init(common::tiny_spec()).unwrap(), 1, 0.1);
    let s = *model.spec();
    let lay = model.layout();
    let p = model.params();
    let tokens = [3u32, 0, 7, 7, 2];
    let trace = model.forward(&tokens).unwrap();
    for (pos, &t) in tokens.iter().enumerate() {
        let mut x: Vec<f64> = p[lay.embed + t as usize * s.embed_dim..][..s.embed_dim].to_vec();
        if pos == 0 {
            x.extend_from_slice(&p[lay.start..lay.start + s.embed_dim]);
        } else {
            let prev = tokens[pos - 1] as usize;
            x.extend_from_slice(&p[lay.embed + prev * s.embed_dim..][..s.embed_dim]);
        }
        for l in 0..s.num_layers {
            let inp = x.len();
            let mut y = vec![0.0; s.hidden_dim];
            for (r, yr) in y.iter_mut().enumerate() {
                let mut acc = p[lay.layer_b[l] + r];
                for c in 0..inp {
                    acc += p[lay.layer_w[l] + r * inp + c] * x[c];
                }
                *yr = acc.tanh();
            }
            for (a, b) in trace.hidden_at(l, pos).iter().zip(&y) {
                assert!((a - b).abs() < 1e-12, "layer {l} position {pos}");
            }
            x = y;
        }
    }
}

#[test]
fn cross_entropy_memorizes_small_corpus() {
    let spec = ModelSpec { vocab_size: 16, embed_dim: 8, num_layers: 2, hidden_dim: 16, seed: 2 };
    let mut model = Model::init(spec).unwrap();
    let mut rng = SplitMix64::new(99);
    // The model sees (previous, current) tokens, so the corpus must never map
    // one such pair to two different successors.
    let mut seen = std::collections::HashMap::new();
    let mut corpus: Vec<Vec<u32>> = Vec::new();
    while corpus.len() < 20 {
        let seq: Vec<u32> = (0..6).map(|_| rng.below(16) as u32).collect();
        let mut trial = seen.clone();
        let consistent = (0..5usize).all(|i| {
            let key = (i.checked_sub(1).map(|j| seq[j]), seq[i]);
            *trial.entry(key).or_insert(seq[i + 1]) == seq[i + 1]
        });
        if consistent {
            seen = trial;
            corpus.push(seq);
        }
    }
    let mut opt = AdamState::new(model.params().len());
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        let (l, g) = loss_and_grads(&model, &corpus, &LossSpec::NextToken).unwrap();
        loss = l;
        opt.step(model.params_mut(), &g, 3e-2);
    }
    let (final_loss, _) = loss_and_grads(&model, &corpus, &LossSpec::NextToken).unwrap();
    assert!(final_loss < 0.1, "mean CE after 200 steps: {final_loss} (last step {loss})");
}

#[test]
fn training_trajectories_are_reproducible() {
    let run = || {
        let mut model = Model::init(common::tiny_spec()).unwrap();
        let mut opt = AdamState::new(model.params().len());
        for _ in 0..10 {
            let (_, g) = loss_and_grads(&model, &common::tiny_batch(), &LossSpec::NextToken).unwrap();
            opt.step(model.params_mut(), &g, 1e-2);
        }
        model.to_params()
    };
    assert!(run().bits_eq(&run()));
}
