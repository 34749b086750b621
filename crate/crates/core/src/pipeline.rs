//! Split → unlearn → merge, end to end, plus the monolithic baseline.
//!
//! Output directory layout:
//!
//! ```text
//! corpus/              generated splits (when the corpus is generated)
//! base.model           θ_init
//! unlearned/<a>.model  one model per nonempty subset (spunge) or `all` (monolithic)
//! records/<a>.json     RunRecord per unlearning run
//! final.model          merged (spunge) or the single unlearned model (monolithic)
//! merge_trace.json     spunge only
//! eval/<name>/         report.json + per_group.csv for base, final and each run
//! result.json          manifest of everything above with checksums
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Corpus, CorpusSpec, Sample};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalSpec};
use crate::neural::{loss_and_grads, AdamState, LossSpec, Model, ModelSpec};
use crate::param_store;
use crate::rng::{fnv1a64, sub_seed, SplitMix64};
use crate::ties_merge::{self, MergeSpec};
use crate::unlearn::{self, RunRecord, UnlearnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Spunge,
    Monolithic,
}

/// Base-model training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1500, lr: 1e-2, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Attribute values to split on; every attribute of the corpus when empty.
    pub attributes: Vec<String>,
    pub min_level: u8,
    pub base_seed: u64,
    pub parallel_width: usize,
    /// Where outputs go unless overridden on the command line.
    pub output_dir: Option<PathBuf>,
    /// Read the corpus from this directory instead of generating it.
    pub corpus_dir: Option<PathBuf>,
    /// Start from this model instead of training one.
    pub base_model: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub merge: MergeSpec,
    pub eval: EvalSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Spunge,
            attributes: Vec::new(),
            min_level: 1,
            base_seed: 0,
            parallel_width: 1,
            output_dir: None,
            corpus_dir: None,
            base_model: None,
            corpus: CorpusSpec::default(),
            model: ModelSpec { vocab_size: 64, embed_dim: 16, num_layers: 3, hidden_dim: 32, seed: 0 },
            train: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            merge: MergeSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML (or JSON for `.json` files). Relative paths inside the
    /// file are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.output_dir, &mut cfg.corpus_dir, &mut cfg.base_model].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallel_width == 0 {
            return Err(Error::Config("parallel_width must be >= 1".into()));
        }
        if !(1..=corpus::MAX_LEVEL).contains(&self.min_level) {
            return Err(Error::Config(format!("min_level must be in 1..=5, got {}", self.min_level)));
        }
        self.merge.validate()?;
        self.model.validate()?;
        self.unlearn.validate(self.model.num_layers)?;
        Ok(())
    }

    /// FNV-1a of the canonical JSON form. `parallel_width` and `output_dir`
    /// do not change any output, so they are left out.
    pub fn hash(&self) -> u64 {
        let canonical = Self { parallel_width: 1, output_dir: None, ..self.clone() };
        fnv1a64(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }
}

/// Trains θ_init on the training split with next-token cross-entropy. Each
/// step draws a batch uniformly with replacement from a seeded stream.
pub fn train_base(train: &[Sample], spec: ModelSpec, cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::init(spec)?;
    if cfg.steps == 0 {
        return Ok(model);
    }
    let seqs: Vec<Vec<u32>> = train.iter().filter(|s| s.tokens.len() >= 2).map(|s| s.tokens.clone()).collect();
    if seqs.is_empty() {
        return Err(Error::Corpus(corpus::CorpusError::InvalidSpec("empty training split".into())));
    }
    let mut rng = SplitMix64::from_label(spec.seed, "train/batches");
    let mut opt = AdamState::new(model.params().len());
    for step in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size.max(1)).map(|_| seqs[rng.below(seqs.len())].clone()).collect();
        let (loss, grads) = loss_and_grads(&model, &batch, &LossSpec::NextToken)?;
        opt.step(model.params_mut(), &grads, cfg.lr);
        if step % 500 == 0 {
            log::debug!("base step {step}: loss {loss:.4}");
        }
    }
    Ok(Model::from_params(spec, &model.to_params())?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetStatus {
    Unlearned,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub attribute: String,
    pub samples: usize,
    pub status: SubsetStatus,
    pub seed: u64,
    pub model: Option<Artifact>,
    pub record: Option<String>,
    pub report: Option<String>,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub mode: Mode,
    pub config_hash: u64,
    pub base_seed: u64,
    pub base_model: Artifact,
    pub subsets: Vec<SubsetResult>,
    pub final_model: Artifact,
    pub merge_trace: Option<String>,
    pub base_report: String,
    pub final_report: String,
}

pub const RESULT_FILE: &str = "result.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn safe_name(attribute: &str) -> String {
    attribute
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct Job {
    attribute: String,
    data: Vec<Sample>,
    seed: u64,
}

pub fn run(cfg: &PipelineConfig, out: &Path) -> Result<PipelineResult> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for sub in ["unlearned", "records", "eval"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    log::info!("pipeline: mode {:?}, base seed {}, config hash {:#018x}", cfg.mode, cfg.base_seed, cfg.hash());

    let corpus = match &cfg.corpus_dir {
        Some(dir) => Corpus::read_dir(dir)?,
        None => {
            let c = corpus::generate(&cfg.corpus)?;
            c.write_dir(&out.join("corpus"))?;
            c
        }
    };

    let base = match &cfg.base_model {
        Some(p) => Model::load(p)?,
        None => train_base(&corpus.train, cfg.model, &cfg.train)?,
    };
    let base_path = out.join("base.model");
    base.save(&base_path)?;
    let base_params = base.to_params();

    let jobs: Vec<Job> = match cfg.mode {
        Mode::Spunge => {
            let values = if cfg.attributes.is_empty() { corpus.layout.attributes.clone() } else { cfg.attributes.clone() };
            let subsets = corpus::split_by_attribute(&corpus.forget, &values)?;
            values
                .into_iter()
                .zip(subsets)
                .map(|(attribute, subset)| {
                    Ok(Job {
                        seed: sub_seed(cfg.base_seed, &format!("subset/{attribute}")),
                        data: corpus::proc(&subset, cfg.min_level, None)?,
                        attribute,
                    })
                })
                .collect::<Result<_>>()?
        }
        Mode::Monolithic => vec![Job {
            attribute: "all".into(),
            data: corpus::proc(&corpus.forget, cfg.min_level, None)?,
            seed: sub_seed(cfg.base_seed, "monolithic"),
        }],
    };
    for j in jobs.iter().filter(|j| j.data.is_empty()) {
        log::warn!("subset {:?} is empty after processing; skipping", j.attribute);
    }
    if jobs.iter().all(|j| j.data.is_empty()) {
        return Err(Error::AllSubsetsEmpty);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallel_width)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<Option<(Model, RunRecord)>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                if job.data.is_empty() {
                    return Ok(None);
                }
                let ucfg = UnlearnConfig { seed: job.seed, ..cfg.unlearn.clone() };
                log::info!("unlearning {:?} on {} samples", job.attribute, job.data.len());
                Ok(Some(unlearn::unlearn(&base, &job.data, &corpus.retain, &ucfg)?))
            })
            .collect::<Result<_>>()
    })?;

    let evaluate_into = |model: &Model, name: &str| -> Result<String> {
        let report = evalkit::evaluate(model, &corpus.eval_contexts, &corpus.eval_benign, &corpus.layout, &cfg.eval, cfg.base_seed)?;
        let dir = out.join("eval").join(name);
        evalkit::emit_report(&report, &dir)?;
        Ok(rel(out, &dir.join(evalkit::REPORT_FILE)))
    };

    let mut subsets = Vec::new();
    let mut unlearned = Vec::new();
    for (job, run) in jobs.iter().zip(runs) {
        let mut entry = SubsetResult {
            attribute: job.attribute.clone(),
            samples: job.data.len(),
            status: SubsetStatus::Skipped,
            seed: job.seed,
            model: None,
            record: None,
            report: None,
        };
        if let Some((model, record)) = run {
            let name = safe_name(&job.attribute);
            let model_path = out.join("unlearned").join(format!("{name}.model"));
            model.save(&model_path)?;
            let record_path = out.join("records").join(format!("{name}.json"));
            write_json(&record_path, &record)?;
            entry.status = SubsetStatus::Unlearned;
            entry.model = Some(Artifact { path: rel(out, &model_path), checksum: model.to_params().checksum() });
            entry.record = Some(rel(out, &record_path));
            entry.report = Some(evaluate_into(&model, &format!("unlearned_{name}"))?);
            unlearned.push(model.to_params());
        }
        subsets.push(entry);
    }

    let (final_params, merge_trace) = match cfg.mode {
        Mode::Spunge => {
            let (merged, trace) = ties_merge::ties(&base_params, &unlearned, &cfg.merge)?;
            let trace_path = out.join("merge_trace.json");
            write_json(&trace_path, &trace)?;
            (merged, Some(rel(out, &trace_path)))
        }
        Mode::Monolithic => (unlearned.pop().expect("one run"), None),
    };
    let final_model = Model::from_params(*base.spec(), &final_params)?;
    let final_path = out.join("final.model");
    final_model.save(&final_path)?;

    let result = PipelineResult {
        mode: cfg.mode,
        config_hash: cfg.hash(),
        base_seed: cfg.base_seed,
        base_model: Artifact { path: rel(out, &base_path), checksum: base_params.checksum() },
        subsets,
        final_model: Artifact { path: rel(out, &final_path), checksum: final_params.checksum() },
        merge_trace,
        base_report: evaluate_into(&base, "base")?,
        final_report: evaluate_into(&final_model, "final")?,
    };
    write_json(&out.join(RESULT_FILE), &result)?;
    Ok(result)
}

impl PipelineResult {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(RESULT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every model referenced by the manifest, in manifest order.
    pub fn artifacts(&self) -> Vec<&Artifact> {
        let mut v = vec![&self.base_model];
        v.extend(self.subsets.iter().filter_map(|s| s.model.as_ref()));
        v.push(&self.final_model);
        v
    }

    /// Loads every referenced model and checks its checksum.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for a in self.artifacts() {
            let ps = param_store::load(&out.join(&a.path))?;
            if ps.checksum() != a.checksum {
                return Err(Error::Config(format!("{} checksum differs from result manifest", a.path)));
            }
        }
        for r in [Some(&self.base_report), Some(&self.final_report)]
            .into_iter()
            .chain(self.subsets.iter().map(|s| s.report.as_ref()))
            .flatten()
        {
            let dir = out.join(r);
            evalkit::read_report(dir.parent().unwrap_or(out))?;
        }
        Ok(())
    }
}
