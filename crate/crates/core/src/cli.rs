//! Command-line front end. One binary, one subcommand per stage; `pipeline`
//! runs them all in-process through the same library calls.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusSpec};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalSpec};
use crate::neural::{Model, ModelSpec};
use crate::param_store;
use crate::pipeline::{self, PipelineConfig, TrainConfig};
use crate::rng::fnv1a64;
use crate::ties_merge::{self, MergeSpec, TrimScope};
use crate::unlearn::{self, Method, UnlearnConfig};

/// Environment variable that overrides the seed of any subcommand.
pub const SEED_ENV: &str = "SPUNGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "spunge", version, about = "Attribute-split unlearning with TIES merging")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its vocabulary layout.
    GenCorpus(GenCorpusArgs),
    /// Train a base model with next-token cross-entropy.
    TrainBase(TrainBaseArgs),
    /// Partition a JSONL dataset by attribute value.
    Split(SplitArgs),
    /// Run one unlearning job.
    Unlearn(UnlearnArgs),
    /// TIES-merge unlearned models against their common base.
    Merge(MergeArgs),
    /// Toxicity and fluency evaluation of one model.
    Eval(EvalArgs),
    /// Full split, unlearn, merge run from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Overrides the seed given in the config.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Corpus spec (TOML or JSON); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

/// Config accepted by `train-base`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBaseConfig {
    pub model: Option<ModelSpec>,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    /// Training split (JSONL).
    #[arg(long)]
    pub train: PathBuf,
    /// `[model]` and `[train]` tables (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Receives one `<attribute>.jsonl` per value.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated values; every value present in the input when omitted.
    #[arg(long, value_delimiter = ',')]
    pub attributes: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub min_level: u8,
    /// Appended to every subset after filtering.
    #[arg(long)]
    pub retain_augment: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Tvn,
    Rmu,
}

#[derive(Debug, Args)]
pub struct UnlearnArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub forget: PathBuf,
    /// Required by RMU.
    #[arg(long)]
    pub retain: Option<PathBuf>,
    /// Unlearning config (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Global,
    PerEntry,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Fraction of components kept by trimming.
    #[arg(long, default_value_t = 0.2)]
    pub k: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "global")]
    pub scope: ScopeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub contexts: PathBuf,
    #[arg(long)]
    pub benign: PathBuf,
    /// Vocabulary layout; `layout.json` next to the contexts file by default.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub continuation_len: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; falls back to `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub parallel_width: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

fn announce(seed: u64, hash: u64) {
    println!("seed {seed} config_hash {hash:#018x}");
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut spec: CorpusSpec = match &a.spec {
        Some(p) => read_config(p)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = a.seed.seed {
        spec.seed = s;
    }
    announce(spec.seed, config_hash(&spec));
    corpus::generate(&spec)?.write_dir(&a.out_dir)?;
    Ok(())
}

fn train_base(a: TrainBaseArgs) -> Result<()> {
    let cfg: TrainBaseConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainBaseConfig::default(),
    };
    let mut spec = cfg.model.unwrap_or(PipelineConfig::default().model);
    if let Some(s) = a.seed.seed {
        spec.seed = s;
    }
    announce(spec.seed, config_hash(&TrainBaseConfig { model: Some(spec), ..cfg.clone() }));
    let train = corpus::read_jsonl(&a.train)?;
    let model = pipeline::train_base(&train, spec, &cfg.train)?;
    create_parent(&a.out)?;
    model.save(&a.out)?;
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let data = corpus::read_jsonl(&a.input)?;
    let values = if a.attributes.is_empty() {
        data.iter().map(|s| corpus::attr(s).to_string()).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        a.attributes.clone()
    };
    let extra = a.retain_augment.as_deref().map(corpus::read_jsonl).transpose()?;
    let subsets = corpus::split_by_attribute(&data, &values)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for (v, subset) in values.iter().zip(subsets) {
        let processed = corpus::proc(&subset, a.min_level, extra.as_deref())?;
        corpus::write_jsonl(&a.out_dir.join(format!("{v}.jsonl")), &processed)?;
        log::info!("{v}: {} samples", processed.len());
    }
    Ok(())
}

fn unlearn_cmd(a: UnlearnArgs) -> Result<()> {
    let mut cfg: UnlearnConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => UnlearnConfig::default(),
    };
    if let Some(m) = a.method {
        cfg.method = match m {
            MethodArg::Tvn => Method::Tvn,
            MethodArg::Rmu => Method::Rmu,
        };
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    announce(cfg.seed, config_hash(&cfg));
    let base = Model::load(&a.init)?;
    let forget = corpus::read_jsonl(&a.forget)?;
    let retain = match &a.retain {
        Some(p) => corpus::read_jsonl(p)?,
        None if cfg.method == Method::Rmu => return Err(Error::Usage("--retain is required for rmu".into())),
        None => Vec::new(),
    };
    let (model, record) = unlearn::unlearn(&base, &forget, &retain, &cfg)?;
    create_parent(&a.out)?;
    model.save(&a.out)?;
    if let Some(r) = &a.record {
        write_json(r, &record)?;
    }
    Ok(())
}

fn merge(a: MergeArgs) -> Result<()> {
    let spec = MergeSpec {
        trim_fraction: a.k,
        lambda: a.lambda,
        trim_scope: match a.scope {
            ScopeArg::Global => TrimScope::Global,
            ScopeArg::PerEntry => TrimScope::PerEntry,
        },
    };
    announce(0, config_hash(&spec));
    let (init, extensions) = param_store::load_with(&a.init)?;
    let models = a.inputs.iter().map(|p| param_store::load(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    let (merged, trace) = ties_merge::ties(&init, &models, &spec)?;
    create_parent(&a.out)?;
    param_store::save_with(&merged, extensions, &a.out)?;
    if let Some(t) = &a.trace {
        write_json(t, &trace)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let spec = EvalSpec { continuation_len: a.continuation_len };
    let seed = a.seed.seed.unwrap_or(0);
    announce(seed, config_hash(&spec));
    let layout_path = match &a.layout {
        Some(p) => p.clone(),
        None => a.contexts.parent().unwrap_or(Path::new(".")).join(corpus::LAYOUT_FILE),
    };
    let layout = corpus::read_layout(&layout_path)?;
    let model = Model::load(&a.model)?;
    let contexts = corpus::read_jsonl(&a.contexts)?;
    let benign = corpus::read_jsonl(&a.benign)?;
    let report = evalkit::evaluate(&model, &contexts, &benign, &layout, &spec, seed)?;
    evalkit::emit_report(&report, &a.out)?;
    println!(
        "toxicity {:.4} retain_accuracy {:.4} retain_perplexity {:.4}",
        report.toxicity_rate, report.retain_accuracy, report.retain_perplexity
    );
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::from_file(&a.config)?;
    if let Some(s) = a.seed.seed {
        cfg.base_seed = s;
    }
    if let Some(w) = a.parallel_width {
        cfg.parallel_width = w;
    }
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Usage("--out is required when the config has no output_dir".into()))?;
    announce(cfg.base_seed, cfg.hash());
    let result = pipeline::run(&cfg, &out)?;
    let final_path = out.join(&result.final_report);
    let report = evalkit::read_report(final_path.parent().unwrap_or(&out))?;
    println!(
        "final toxicity {:.4} retain_accuracy {:.4} retain_perplexity {:.4}",
        report.toxicity_rate, report.retain_accuracy, report.retain_perplexity
    );
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::TrainBase(a) => train_base(a),
        Command::Split(a) => split(a),
        Command::Unlearn(a) => unlearn_cmd(a),
        Command::Merge(a) => merge(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
