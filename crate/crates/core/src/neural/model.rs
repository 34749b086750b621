use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::param_store::{self, ParamSet, StoreError};
use crate::rng::SplitMix64;

use super::NeuralError;

/// Architecture of the token-wise network.
///
/// Position `i` sees `[embed[t_i]; embed[t_{i-1}]]` (a learned `start` vector
/// stands in for `t_{-1}`), followed by `num_layers` tanh layers of width
/// `hidden_dim` and a linear head over the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(NeuralError::InvalidSpec(format!(
                "all model dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn layer_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim()
        } else {
            self.hidden_dim
        }
    }
}

pub fn layer_weight_name(layer: usize) -> String {
    format!("layer_{layer}.weight")
}

pub fn layer_bias_name(layer: usize) -> String {
    format!("layer_{layer}.bias")
}

pub const EMBED: &str = "embed";
pub const START: &str = "start";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Where each parameter lives in the flat `f64` vector. Entries are laid out
/// in name order, matching [`ParamSet::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub entries: Vec<(String, Vec<usize>, usize)>,
    pub total: usize,
    pub embed: usize,
    pub start: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub layer_w: Vec<usize>,
    pub layer_b: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut shapes: Vec<(String, Vec<usize>)> = vec![
            (EMBED.into(), vec![spec.vocab_size, spec.embed_dim]),
            (START.into(), vec![spec.embed_dim]),
            (HEAD_WEIGHT.into(), vec![spec.vocab_size, spec.hidden_dim]),
            (HEAD_BIAS.into(), vec![spec.vocab_size]),
        ];
        for l in 0..spec.num_layers {
            shapes.push((layer_weight_name(l), vec![spec.hidden_dim, spec.layer_in_dim(l)]));
            shapes.push((layer_bias_name(l), vec![spec.hidden_dim]));
        }
        shapes.sort_by(|a, b| a.0.cmp(&b.0));

        let mut offset = 0;
        let entries: Vec<_> = shapes
            .into_iter()
            .map(|(name, shape)| {
                let here = offset;
                offset += shape.iter().product::<usize>();
                (name, shape, here)
            })
            .collect();
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.0 == name)
                .map(|e| e.2)
                .expect("layout entry exists")
        };
        Self {
            embed: find(EMBED),
            start: find(START),
            head_w: find(HEAD_WEIGHT),
            head_b: find(HEAD_BIAS),
            layer_w: (0..spec.num_layers).map(|l| find(&layer_weight_name(l))).collect(),
            layer_b: (0..spec.num_layers).map(|l| find(&layer_bias_name(l))).collect(),
            entries,
            total: offset,
        }
    }

    /// Offset and length of a named entry.
    pub fn range(&self, name: &str) -> Option<(usize, usize)> {
        self.entries
            .iter()
            .find(|e| e.0 == name)
            .map(|e| (e.2, e.1.iter().product()))
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.iter().find(|e| e.0 == name).map(|e| e.1.as_slice())
    }
}

/// Network parameters as a flat `f64` vector. The `f32` [`ParamSet`] is the
/// storage form; computation runs in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<f64>,
}

/// Activations of one forward pass over a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub seq_len: usize,
    /// `seq_len × input_dim` network inputs.
    pub input: Vec<f64>,
    /// Per layer, `seq_len × hidden_dim` post-tanh activations.
    pub hidden: Vec<Vec<f64>>,
    /// `seq_len × vocab_size`.
    pub logits: Vec<f64>,
    hidden_dim: usize,
    vocab_size: usize,
}

impl ForwardTrace {
    pub fn hidden_at(&self, layer: usize, pos: usize) -> &[f64] {
        &self.hidden[layer][pos * self.hidden_dim..(pos + 1) * self.hidden_dim]
    }

    pub fn logits_at(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }
}

/// `out[i] = bias[i] + Σ_j w[i, j] x[j]` for row-major `w: rows × x.len()`.
pub(crate) fn affine(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = bias[i] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

impl Model {
    /// Seeded initialization: weights uniform in `[-1, 1)` scaled by
    /// `1/sqrt(fan_in)`, biases zero. Each entry draws from its own named
    /// stream.
    pub fn init(spec: ModelSpec) -> Result<Self, NeuralError> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.total];
        for (name, shape, offset) in &layout.entries {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in = if name == EMBED || name == START {
                1
            } else {
                *shape.last().expect("matrix")
            };
            let scale = 1.0 / (fan_in as f64).sqrt();
            let mut rng = SplitMix64::from_label(spec.seed, &format!("init/{name}"));
            let n: usize = shape.iter().product();
            for p in &mut params[*offset..offset + n] {
                *p = rng.next_signed() * scale;
            }
        }
        // Round through f32 so a freshly initialized model equals its stored form.
        for p in &mut params {
            *p = f64::from(*p as f32);
        }
        Ok(Self { spec, layout, params })
    }

    pub fn from_params(spec: ModelSpec, ps: &ParamSet) -> Result<Self, NeuralError> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let names: Vec<&str> = ps.names().collect();
        let expected: Vec<&str> = layout.entries.iter().map(|e| e.0.as_str()).collect();
        if names != expected {
            return Err(NeuralError::Store(StoreError::Incompatible(format!(
                "parameter names {names:?} do not match model layout {expected:?}"
            ))));
        }
        for (name, shape, _) in &layout.entries {
            let got = ps.get(name).expect("checked").shape();
            if got != shape.as_slice() {
                return Err(NeuralError::Store(StoreError::ShapeMismatch {
                    name: name.clone(),
                    detail: format!("expected {shape:?}, got {got:?}"),
                }));
            }
        }
        let params = ps.flatten().into_iter().map(f64::from).collect();
        Ok(Self { spec, layout, params })
    }

    pub fn from_flat(spec: ModelSpec, params: Vec<f64>) -> Result<Self, NeuralError> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.total {
            return Err(NeuralError::InvalidSpec(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { spec, layout, params })
    }

    pub fn to_params(&self) -> ParamSet {
        ParamSet::from_entries(self.layout.entries.iter().map(|(name, shape, offset)| {
            let n: usize = shape.iter().product();
            let data = self.params[*offset..offset + n]
                .iter()
                .map(|&v| v as f32)
                .collect();
            (name.clone(), shape.clone(), data)
        }))
        .expect("layout is well formed")
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), NeuralError> {
        if tokens.is_empty() {
            return Err(NeuralError::EmptySequence);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(NeuralError::TokenOutOfRange {
                token: bad,
                vocab_size: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    /// Network input for position `pos`.
    fn write_input(&self, tokens: &[u32], pos: usize, out: &mut [f64]) {
        let e = self.spec.embed_dim;
        let cur = self.layout.embed + tokens[pos] as usize * e;
        out[..e].copy_from_slice(&self.params[cur..cur + e]);
        let prev = if pos == 0 {
            self.layout.start
        } else {
            self.layout.embed + tokens[pos - 1] as usize * e
        };
        out[e..].copy_from_slice(&self.params[prev..prev + e]);
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardTrace, NeuralError> {
        self.forward_to(tokens, self.spec.num_layers, true)
    }

    /// Runs layers `0..layers`; the head only if `with_logits`.
    pub fn forward_to(
        &self,
        tokens: &[u32],
        layers: usize,
        with_logits: bool,
    ) -> Result<ForwardTrace, NeuralError> {
        self.check_tokens(tokens)?;
        let s = &self.spec;
        let t_len = tokens.len();
        let (din, h, v) = (s.input_dim(), s.hidden_dim, s.vocab_size);
        let mut input = vec![0.0; t_len * din];
        for pos in 0..t_len {
            self.write_input(tokens, pos, &mut input[pos * din..(pos + 1) * din]);
        }
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = s.layer_in_dim(l);
            let w = &self.params[self.layout.layer_w[l]..self.layout.layer_w[l] + h * in_dim];
            let b = &self.params[self.layout.layer_b[l]..self.layout.layer_b[l] + h];
            let mut out = vec![0.0; t_len * h];
            for pos in 0..t_len {
                let x = if l == 0 {
                    &input[pos * din..(pos + 1) * din]
                } else {
                    &hidden[l - 1][pos * h..(pos + 1) * h]
                };
                let o = &mut out[pos * h..(pos + 1) * h];
                affine(w, b, x, o);
                o.iter_mut().for_each(|z| *z = z.tanh());
            }
            hidden.push(out);
        }
        let mut logits = Vec::new();
        if with_logits && layers == s.num_layers {
            logits = vec![0.0; t_len * v];
            let w = &self.params[self.layout.head_w..self.layout.head_w + v * h];
            let b = &self.params[self.layout.head_b..self.layout.head_b + v];
            let top = &hidden[layers - 1];
            for pos in 0..t_len {
                affine(w, b, &top[pos * h..(pos + 1) * h], &mut logits[pos * v..(pos + 1) * v]);
            }
        }
        Ok(ForwardTrace {
            seq_len: t_len,
            input,
            hidden,
            logits,
            hidden_dim: h,
            vocab_size: v,
        })
    }

    /// Logits for the next token given the last two tokens of a context.
    pub fn next_logits(&self, prev: Option<u32>, cur: u32) -> Result<Vec<f64>, NeuralError> {
        let trace = match prev {
            Some(p) => self.forward(&[p, cur])?,
            None => self.forward(&[cur])?,
        };
        Ok(trace.logits_at(trace.seq_len - 1).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut ext = Map::new();
        ext.insert(
            "model_spec".into(),
            serde_json::to_value(self.spec).expect("spec serializes"),
        );
        param_store::save_with(&self.to_params(), ext, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let (ps, ext) = param_store::load_with(path)?;
        let spec_value = ext.get("model_spec").cloned().unwrap_or(Value::Null);
        let spec: ModelSpec = serde_json::from_value(spec_value).map_err(|e| {
            NeuralError::Store(StoreError::CorruptManifest(format!(
                "missing or invalid model_spec: {e}"
            )))
        })?;
        Self::from_params(spec, &ps)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
