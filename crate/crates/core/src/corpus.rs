//! Synthetic attribute-structured corpus, JSONL ingestion, attribute splits and
//! subset processing.
//!
//! Vocabulary layout, in token-id order: benign tokens, one marker token per
//! attribute, then a disjoint harmful token set `T_a` per attribute. Benign
//! text follows a fixed successor permutation. A marked sequence is a benign
//! prefix, the marker of its attribute, then either the benign continuation
//! (`succ` of the token before the marker) or, for harmful samples, a run of
//! tokens from `T_a` before the benign chain resumes. The first harmful token
//! is picked by the token preceding the marker, so every continuation is
//! predictable from the last two tokens.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

/// Attribute label carried by unmarked (purely benign) text.
pub const NEUTRAL_ATTRIBUTE: &str = "none";

pub const MAX_LEVEL: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("vocabulary of {vocab_size} is too small: layout needs {needed} tokens with at least 2 benign")]
    VocabTooSmall { vocab_size: usize, needed: usize },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("duplicate attribute value {0:?}")]
    DuplicateValue(String),
    #[error("min_level must be in 1..=5, got {0}")]
    InvalidLevel(u8),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub attribute: String,
    pub level: u8,
    pub is_harmful: bool,
}

/// The attribute annotation of a sample.
pub fn attr(s: &Sample) -> &str {
    &s.attribute
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_attributes: usize,
    /// Attribute names; `group_0..group_{n-1}` when empty.
    pub attribute_names: Vec<String>,
    pub vocab_size: usize,
    pub harmful_per_attribute: usize,
    /// Probability that a marked training sequence continues harmfully.
    pub p_harmful: f64,
    pub seq_len: usize,
    /// Benign tokens before the marker in evaluation contexts.
    pub context_len: usize,
    pub n_train: usize,
    pub n_forget: usize,
    pub n_retain: usize,
    pub n_eval_benign: usize,
    pub n_eval_contexts: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_attributes: 5,
            attribute_names: Vec::new(),
            vocab_size: 64,
            harmful_per_attribute: 4,
            p_harmful: 0.7,
            seq_len: 12,
            context_len: 4,
            n_train: 4000,
            n_forget: 500,
            n_retain: 500,
            n_eval_benign: 200,
            n_eval_contexts: 200,
            seed: 1,
        }
    }
}

/// Longest harmful run; also the room reserved after a marker.
const MAX_RUN: usize = MAX_LEVEL as usize;

impl CorpusSpec {
    pub fn attribute_values(&self) -> Vec<String> {
        if self.attribute_names.is_empty() {
            (0..self.n_attributes).map(|i| format!("group_{i}")).collect()
        } else {
            self.attribute_names.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_attributes == 0 {
            return Err(CorpusError::InvalidSpec("n_attributes must be >= 1".into()));
        }
        if !self.attribute_names.is_empty() {
            if self.attribute_names.len() != self.n_attributes {
                return Err(CorpusError::InvalidSpec(format!(
                    "{} attribute names for {} attributes",
                    self.attribute_names.len(),
                    self.n_attributes
                )));
            }
            let mut seen = std::collections::BTreeSet::new();
            for n in &self.attribute_names {
                if n.is_empty() || n == NEUTRAL_ATTRIBUTE || !seen.insert(n) {
                    return Err(CorpusError::InvalidSpec(format!("bad attribute name {n:?}")));
                }
            }
        }
        if !(self.p_harmful > 0.0 && self.p_harmful < 1.0) {
            return Err(CorpusError::InvalidSpec(format!(
                "p_harmful must be in (0, 1), got {}",
                self.p_harmful
            )));
        }
        if self.harmful_per_attribute == 0 {
            return Err(CorpusError::InvalidSpec("harmful_per_attribute must be >= 1".into()));
        }
        if self.seq_len < MAX_RUN + 2 {
            return Err(CorpusError::InvalidSpec(format!(
                "seq_len must be >= {}, got {}",
                MAX_RUN + 2,
                self.seq_len
            )));
        }
        if self.context_len == 0 {
            return Err(CorpusError::InvalidSpec("context_len must be >= 1".into()));
        }
        let needed = self.n_attributes * (1 + self.harmful_per_attribute) + 2;
        if self.vocab_size < needed {
            return Err(CorpusError::VocabTooSmall {
                vocab_size: self.vocab_size,
                needed,
            });
        }
        Ok(())
    }
}

/// Concrete token assignment derived from a [`CorpusSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub attributes: Vec<String>,
    pub benign: Vec<u32>,
    pub markers: Vec<u32>,
    pub harmful: Vec<Vec<u32>>,
    /// `successor[i]` follows `benign[i]`; a single cycle over the benign tokens.
    pub successor: Vec<u32>,
}

impl VocabLayout {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_attributes;
        let m = spec.harmful_per_attribute;
        let n_benign = spec.vocab_size - n * (1 + m);
        let benign: Vec<u32> = (0..n_benign as u32).collect();
        let markers: Vec<u32> = (0..n).map(|a| (n_benign + a) as u32).collect();
        let harmful: Vec<Vec<u32>> = (0..n)
            .map(|a| (0..m).map(|j| (n_benign + n + a * m + j) as u32).collect())
            .collect();

        let mut cycle = benign.clone();
        SplitMix64::from_label(spec.seed, "corpus/successor").shuffle(&mut cycle);
        let mut successor = vec![0u32; n_benign];
        for i in 0..n_benign {
            successor[cycle[i] as usize] = cycle[(i + 1) % n_benign];
        }
        Ok(Self {
            attributes: spec.attribute_values(),
            benign,
            markers,
            harmful,
            successor,
        })
    }

    pub fn attribute_index(&self, attribute: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == attribute)
    }

    pub fn is_benign(&self, token: u32) -> bool {
        (token as usize) < self.benign.len()
    }

    pub fn succ(&self, token: u32) -> u32 {
        self.successor[token as usize]
    }

    /// Harmful set of an attribute.
    pub fn harmful_set(&self, attribute: &str) -> Option<&[u32]> {
        self.attribute_index(attribute).map(|a| self.harmful[a].as_slice())
    }

    fn benign_chain(&self, start: u32, len: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut t = start;
        for _ in 0..len {
            out.push(t);
            t = self.succ(t);
        }
        out
    }
}

/// The generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub layout: VocabLayout,
    /// Marked sequences, harmful with probability `p_harmful`.
    pub train: Vec<Sample>,
    /// Harmful marked sequences only: the data to unlearn.
    pub forget: Vec<Sample>,
    /// Unmarked benign text used as the retain set.
    pub retain: Vec<Sample>,
    pub eval_benign: Vec<Sample>,
    /// Benign prefixes ending at an attribute marker, attributes balanced.
    pub eval_contexts: Vec<Sample>,
}

fn marked_sample(
    layout: &VocabLayout,
    spec: &CorpusSpec,
    rng: &mut SplitMix64,
    attribute: usize,
    harmful: bool,
) -> Sample {
    let len = spec.seq_len;
    let marker_pos = 1 + rng.below(len - MAX_RUN - 1);
    let first = layout.benign[rng.below(layout.benign.len())];
    let mut tokens = layout.benign_chain(first, marker_pos);
    let before = tokens[marker_pos - 1];
    tokens.push(layout.markers[attribute]);

    let mut run = 0;
    if harmful {
        run = 1 + rng.below(MAX_RUN);
        let set = &layout.harmful[attribute];
        let start = before as usize % set.len();
        tokens.extend((0..run).map(|j| set[(start + j) % set.len()]));
    }
    let remaining = len - tokens.len();
    tokens.extend(layout.benign_chain(layout.succ(before), remaining));
    Sample {
        tokens,
        attribute: layout.attributes[attribute].clone(),
        level: run.clamp(1, MAX_RUN) as u8,
        is_harmful: harmful,
    }
}

fn benign_sample(layout: &VocabLayout, len: usize, rng: &mut SplitMix64) -> Sample {
    let first = layout.benign[rng.below(layout.benign.len())];
    Sample {
        tokens: layout.benign_chain(first, len),
        attribute: NEUTRAL_ATTRIBUTE.to_string(),
        level: 1,
        is_harmful: false,
    }
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    let layout = VocabLayout::new(spec)?;
    let n = spec.n_attributes;

    let mut rng = SplitMix64::from_label(spec.seed, "corpus/train");
    let train = (0..spec.n_train)
        .map(|_| {
            let a = rng.below(n);
            let harmful = rng.bernoulli(spec.p_harmful);
            marked_sample(&layout, spec, &mut rng, a, harmful)
        })
        .collect();

    let mut rng = SplitMix64::from_label(spec.seed, "corpus/forget");
    let forget = (0..spec.n_forget)
        .map(|_| {
            let a = rng.below(n);
            marked_sample(&layout, spec, &mut rng, a, true)
        })
        .collect();

    let mut rng = SplitMix64::from_label(spec.seed, "corpus/retain");
    let retain = (0..spec.n_retain)
        .map(|_| benign_sample(&layout, spec.seq_len, &mut rng))
        .collect();

    let mut rng = SplitMix64::from_label(spec.seed, "corpus/eval_benign");
    let eval_benign = (0..spec.n_eval_benign)
        .map(|_| benign_sample(&layout, spec.seq_len, &mut rng))
        .collect();

    let mut rng = SplitMix64::from_label(spec.seed, "corpus/eval_contexts");
    let eval_contexts = (0..spec.n_eval_contexts)
        .map(|i| {
            let a = i % n;
            let first = layout.benign[rng.below(layout.benign.len())];
            let mut tokens = layout.benign_chain(first, spec.context_len);
            tokens.push(layout.markers[a]);
            Sample {
                tokens,
                attribute: layout.attributes[a].clone(),
                level: 1,
                is_harmful: false,
            }
        })
        .collect();

    Ok(Corpus {
        layout,
        train,
        forget,
        retain,
        eval_benign,
        eval_contexts,
    })
}

/// `D_t = {x ∈ d | attr(x) = values[t]}` for each `t`, order preserved.
pub fn split_by_attribute(d: &[Sample], values: &[String]) -> Result<Vec<Vec<Sample>>> {
    let mut seen = std::collections::BTreeSet::new();
    for v in values {
        if !seen.insert(v) {
            return Err(CorpusError::DuplicateValue(v.clone()));
        }
    }
    Ok(values
        .iter()
        .map(|v| d.iter().filter(|s| attr(s) == v).cloned().collect())
        .collect())
}

/// Keeps samples with `level >= min_level`, then appends `retain_augment`.
pub fn proc(subset: &[Sample], min_level: u8, retain_augment: Option<&[Sample]>) -> Result<Vec<Sample>> {
    if !(1..=MAX_LEVEL).contains(&min_level) {
        return Err(CorpusError::InvalidLevel(min_level));
    }
    let mut out: Vec<Sample> = subset.iter().filter(|s| s.level >= min_level).cloned().collect();
    if let Some(extra) = retain_augment {
        out.extend_from_slice(extra);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let io = |source| CorpusError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).expect("sample serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let io = |source| CorpusError::Io { path: path.display().to_string(), source };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let s: Sample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if s.tokens.is_empty() {
            return Err(parse_err("empty token list".into()));
        }
        if !(1..=MAX_LEVEL).contains(&s.level) {
            return Err(parse_err(format!("level {} outside 1..=5", s.level)));
        }
        out.push(s);
    }
    Ok(out)
}

pub const LAYOUT_FILE: &str = "layout.json";

impl Corpus {
    /// Writes every split as JSONL plus `layout.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.display().to_string(), source })?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("forget.jsonl"), &self.forget)?;
        write_jsonl(&dir.join("retain.jsonl"), &self.retain)?;
        write_jsonl(&dir.join("eval_benign.jsonl"), &self.eval_benign)?;
        write_jsonl(&dir.join("eval_contexts.jsonl"), &self.eval_contexts)?;
        write_layout(&dir.join(LAYOUT_FILE), &self.layout)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            layout: read_layout(&dir.join(LAYOUT_FILE))?,
            train: read_jsonl(&dir.join("train.jsonl"))?,
            forget: read_jsonl(&dir.join("forget.jsonl"))?,
            retain: read_jsonl(&dir.join("retain.jsonl"))?,
            eval_benign: read_jsonl(&dir.join("eval_benign.jsonl"))?,
            eval_contexts: read_jsonl(&dir.join("eval_contexts.jsonl"))?,
        })
    }
}

pub fn write_layout(path: &Path, layout: &VocabLayout) -> Result<()> {
    let text = serde_json::to_string_pretty(layout).expect("layout serializes");
    fs::write(path, text).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

pub fn read_layout(path: &Path) -> Result<VocabLayout> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_train: 300,
            n_forget: 100,
            n_retain: 50,
            n_eval_benign: 20,
            n_eval_contexts: 25,
            ..CorpusSpec::default()
        }
    }

    fn sample(attribute: &str, level: u8) -> Sample {
        Sample { tokens: vec![0], attribute: attribute.into(), level, is_harmful: level > 1 }
    }

    #[test]
    fn layout_is_disjoint_and_cyclic() {
        let l = VocabLayout::new(&CorpusSpec::default()).unwrap();
        let mut all: Vec<u32> = l.benign.clone();
        all.extend(&l.markers);
        all.extend(l.harmful.iter().flatten());
        let mut sorted = all.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all.len());
        assert_eq!(all.len(), 64);
        // The successor map visits every benign token before returning.
        let mut t = l.benign[0];
        for step in 1..=l.benign.len() {
            t = l.succ(t);
            assert_eq!(t == l.benign[0], step == l.benign.len());
        }
    }

    #[test]
    fn vocab_too_small_rejected() {
        let spec = CorpusSpec { vocab_size: 20, ..CorpusSpec::default() };
        assert!(matches!(generate(&spec), Err(CorpusError::VocabTooSmall { .. })));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
    }

    #[test]
    fn rare_harm_stays_rare() {
        let spec = CorpusSpec { p_harmful: 0.01, n_train: 100, ..small() };
        let c = generate(&spec).unwrap();
        assert!(c.train.iter().filter(|s| s.is_harmful).count() < 10);
    }

    #[test]
    fn single_attribute_corpus() {
        let spec = CorpusSpec { n_attributes: 1, ..small() };
        let c = generate(&spec).unwrap();
        assert!(c.forget.iter().all(|s| s.attribute == "group_0"));
        assert!(c.train.iter().filter(|s| s.is_harmful).all(|s| s.attribute == "group_0"));
    }

    #[test]
    fn harmful_samples_follow_their_marker() {
        let c = generate(&small()).unwrap();
        for s in &c.forget {
            assert!(s.is_harmful);
            let a = c.layout.attribute_index(&s.attribute).unwrap();
            let pos = s.tokens.iter().position(|&t| t == c.layout.markers[a]).unwrap();
            let set = &c.layout.harmful[a];
            let run = s.tokens[pos + 1..].iter().take_while(|t| set.contains(t)).count();
            assert_eq!(run, s.level as usize);
            assert_eq!(s.tokens.len(), small().seq_len);
        }
        for s in &c.eval_contexts {
            let last = *s.tokens.last().unwrap();
            assert_eq!(c.layout.markers[c.layout.attribute_index(&s.attribute).unwrap()], last);
        }
        assert!(c.retain.iter().all(|s| s.tokens.iter().all(|&t| c.layout.is_benign(t))));
    }

    #[test]
    fn attr_reads_annotation() {
        let xs = [sample("g0", 1), sample("g1", 1), sample("g0", 1)];
        let got: Vec<&str> = xs.iter().map(attr).collect();
        assert_eq!(got, ["g0", "g1", "g0"]);
    }

    #[test]
    fn split_examples() {
        let d = vec![sample("a", 1), sample("b", 2), sample("a", 3), sample("c", 4)];
        let values: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let parts = split_by_attribute(&d, &values).unwrap();
        assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), [2, 1, 1]);
        assert_eq!(parts[0][1].level, 3);
        let missing = split_by_attribute(&d, &["zzz".to_string()]).unwrap();
        assert!(missing[0].is_empty());
        assert!(matches!(
            split_by_attribute(&d, &["a".into(), "a".into()]),
            Err(CorpusError::DuplicateValue(_))
        ));
    }

    #[test]
    fn proc_filters_by_level() {
        let subset: Vec<Sample> = [1, 3, 5, 2].iter().map(|&l| sample("g", l)).collect();
        let kept = proc(&subset, 3, None).unwrap();
        assert_eq!(kept.iter().map(|s| s.level).collect::<Vec<_>>(), [3, 5]);
        let extra = [sample("none", 1)];
        assert_eq!(proc(&subset, 1, Some(&extra)).unwrap().len(), 5);
        let low: Vec<Sample> = (0..3).map(|_| sample("g", 1)).collect();
        assert!(proc(&low, 5, None).unwrap().is_empty());
        assert!(matches!(proc(&low, 0, None), Err(CorpusError::InvalidLevel(0))));
        assert!(matches!(proc(&low, 6, None), Err(CorpusError::InvalidLevel(6))));
    }

    #[test]
    fn jsonl_format_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let s = Sample { tokens: vec![1, 2], attribute: "group_2".into(), level: 4, is_harmful: true };
        write_jsonl(&path, std::slice::from_ref(&s)).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"tokens\":[1,2],\"attribute\":\"group_2\",\"level\":4,\"is_harmful\":true}\n");
        assert_eq!(read_jsonl(&path).unwrap(), vec![s]);
        fs::write(&path, "{\"tokens\":[],\"attribute\":\"a\",\"level\":1,\"is_harmful\":false}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn corpus_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&small()).unwrap();
        c.write_dir(dir.path()).unwrap();
        assert_eq!(Corpus::read_dir(dir.path()).unwrap(), c);
    }
}
