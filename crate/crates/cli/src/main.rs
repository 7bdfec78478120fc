use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use refgaze_core::autodiff::{AutodiffError, Probe};
use refgaze_core::data::{
    load_corpus, read_scanpaths, save_corpus, synthesize_corpus, write_scanpaths, Corpus, DataError, ScanpathEntry,
    SynthConfig,
};
use refgaze_core::engine::{
    derive_seed, grad_check_total_loss, pretrain, train, EngineError, InferMode, StageCache,
    TrainConfig,
};
use refgaze_core::harness::{
    bbox_baseline, evaluate, random_baseline, render_svg, BaselineConfig, EvalConfig, Source, WordColors,
};
use refgaze_core::metrics::MetricError;
use refgaze_core::model::{GazeModel, ModelConfig, Vocab};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const MODEL_FILE: &str = "model.json";
const CHECKPOINT_FILE: &str = "model.ckpt";
/// Output files whose content includes wall-clock times.
const TIMED_FILES: [&str; 1] = ["log.jsonl"];

#[derive(Parser)]
#[command(name = "refgaze", version, about = "Incremental gaze scanpath prediction for referring expressions")]
struct Cli {
    /// Overrides the seed of the loaded config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config for the subcommand; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth,
    /// Pre-train the grounding tasks on complete expressions.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Start from this model directory instead of a fresh model.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Teacher-forced training on gaze packs.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Validation corpus for early stopping.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Generate scanpaths for every record.
    Infer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Score a model and the baselines.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Draw human and generated scanpaths as SVG.
    Render {
        #[arg(long)]
        corpus: PathBuf,
        /// Scanpaths written by `infer`.
        #[arg(long)]
        scanpaths: Option<PathBuf>,
        /// Only this record.
        #[arg(long)]
        trial: Option<String>,
    },
    /// Finite-difference check of the full training loss on one record.
    Gradcheck {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Index of the record to check.
        #[arg(long, default_value_t = 0)]
        record: usize,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::Numeric { .. } => CliError::Numeric(e.to_string()),
            AutodiffError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(m) => CliError::Config(m),
            EngineError::Numeric { .. } => CliError::Numeric(e.to_string()),
            EngineError::Model(e) => e.into(),
            EngineError::Metric(e) => e.into(),
            EngineError::Io(e) => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Used when no `--model` directory is given.
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferConfig {
    samples: usize,
    mode: InferMode,
    seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { samples: 10, mode: InferMode::Sample, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalCliConfig {
    eval: EvalConfig,
    /// Score the random and bbox baselines too.
    baselines: bool,
    /// Score the human scanpaths against themselves.
    gt_replay: bool,
    /// Fixations per baseline pack are drawn from `0..=l_p`.
    baseline_l_p: usize,
}

impl Default for EvalCliConfig {
    fn default() -> Self {
        Self { eval: EvalConfig::default(), baselines: true, gt_replay: true, baseline_l_p: 6 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RenderConfig {
    /// Render at most this many records.
    max_records: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckConfig {
    /// Used when no `--model` directory is given.
    model: ModelConfig,
    train: TrainConfig,
    eps: f64,
    /// Coordinates probed per parameter tensor.
    per_tensor: usize,
    tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::train(), eps: 1e-3, per_tensor: 1, tolerance: 1e-3 }
    }
}

/// The command's defaults with the fields of the JSON file at `path`
/// merged over them, at any depth.
fn read_config<T: Serialize + for<'de> Deserialize<'de>>(path: Option<&Path>, default: T) -> Result<T> {
    let Some(path) = path else { return Ok(default) };
    let err = |e: &dyn std::fmt::Display| CliError::Config(format!("{}: {e}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| err(&e))?;
    let user: Value = serde_json::from_str(&text).map_err(|e| err(&e))?;
    if !user.is_object() {
        return Err(err(&"expected a JSON object"));
    }
    let mut merged = serde_json::to_value(&default).expect("configs serialize");
    merge(&mut merged, user);
    serde_json::from_value(merged).map_err(|e| err(&e))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(fs::read(path)?)))
}

/// Records inputs and outputs of one run in `manifest.json`.
struct Manifest {
    command: &'static str,
    seed: u64,
    config: Value,
    inputs: Vec<Value>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str, seed: u64, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("configs serialize");
        Self { command, seed, config, inputs: Vec::new(), outputs: Vec::new() }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let hash = if path.is_dir() {
            let mut h = Sha256::new();
            for name in [MODEL_FILE, CHECKPOINT_FILE] {
                h.update(fs::read(path.join(name))?);
            }
            format!("{:x}", h.finalize())
        } else {
            sha256_file(path)?
        };
        self.inputs.push(json!({ "role": role, "path": path.display().to_string(), "sha256": hash }));
        Ok(())
    }

    fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn write(&self, out: &Path) -> Result<()> {
        let outputs = self
            .outputs
            .iter()
            .map(|name| {
                if TIMED_FILES.contains(&name.as_str()) {
                    Ok(json!({ "path": name, "sha256": null, "note": "contains wall-time fields" }))
                } else {
                    Ok(json!({ "path": name, "sha256": sha256_file(&out.join(name))? }))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let config_text = serde_json::to_string(&self.config).expect("value serializes");
        let doc = json!({
            "tool": "refgaze",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "config_sha256": format!("{:x}", Sha256::digest(config_text.as_bytes())),
            "inputs": self.inputs,
            "outputs": outputs,
        });
        let mut w = BufWriter::new(File::create(out.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &doc).map_err(std::io::Error::from)?;
        writeln!(w)?;
        Ok(())
    }
}

fn load_model(dir: &Path) -> Result<GazeModel> {
    let config = File::open(dir.join(MODEL_FILE)).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let ckpt = File::open(dir.join(CHECKPOINT_FILE)).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    Ok(GazeModel::load(config, BufReader::new(ckpt))?.0)
}

fn save_model(model: &GazeModel, out: &Path, seed: u64, manifest: &mut Manifest) -> Result<()> {
    let mut cfg = BufWriter::new(File::create(out.join(MODEL_FILE))?);
    let mut ckpt = BufWriter::new(File::create(out.join(CHECKPOINT_FILE))?);
    model.save(&mut cfg, &mut ckpt, seed)?;
    cfg.flush()?;
    ckpt.flush()?;
    manifest.output(MODEL_FILE);
    manifest.output(CHECKPOINT_FILE);
    Ok(())
}

fn model_or_new(dir: Option<&Path>, cfg: &ModelConfig, corpus: &Corpus, seed: u64, m: &mut Manifest) -> Result<GazeModel> {
    match dir {
        Some(d) => {
            m.input("model", d)?;
            load_model(d)
        }
        None => Ok(GazeModel::new(cfg.clone(), Vocab::of(corpus), seed)?),
    }
}

fn corpus_input(path: &Path, role: &str, m: &mut Manifest) -> Result<Corpus> {
    let c = load_corpus(path)?;
    m.input(role, path)?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth => {
            let mut cfg = read_config(config, SynthConfig::default())?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let corpus = synthesize_corpus(&cfg)?;
            let mut m = Manifest::new("synth", cfg.seed, &cfg);
            save_corpus(&corpus, out.join("corpus.jsonl"))?;
            m.output("corpus.jsonl");
            m.write(out)?;
            let fixations: usize = corpus
                .records
                .iter()
                .flat_map(|r| &r.human_scanpaths)
                .map(|h| h.scanpath.num_fixations())
                .sum();
            println!("records {} fixations {fixations}", corpus.len());
        }
        Command::Pretrain { corpus, model } => {
            let mut cfg = read_config(config, RunConfig { model: ModelConfig::default(), train: TrainConfig::pretrain() })?;
            cfg.train.seed = cli.seed.unwrap_or(cfg.train.seed);
            let mut m = Manifest::new("pretrain", cfg.train.seed, &cfg);
            let c = corpus_input(&corpus, "corpus", &mut m)?;
            let mut model = model_or_new(model.as_deref(), &cfg.model, &c, cfg.train.seed, &mut m)?;
            let log = pretrain(&mut model, &c, &cfg.train)?;
            finish_run(&model, &log, out, cfg.train.seed, m)?;
        }
        Command::Train { corpus, model, val } => {
            let mut cfg = read_config(config, RunConfig { model: ModelConfig::default(), train: TrainConfig::train() })?;
            cfg.train.seed = cli.seed.unwrap_or(cfg.train.seed);
            let mut m = Manifest::new("train", cfg.train.seed, &cfg);
            let c = corpus_input(&corpus, "corpus", &mut m)?;
            let v = val.map(|p| corpus_input(&p, "val", &mut m)).transpose()?;
            let mut model = model_or_new(model.as_deref(), &cfg.model, &c, cfg.train.seed, &mut m)?;
            let log = train(&mut model, &c, v.as_ref(), &cfg.train)?;
            finish_run(&model, &log, out, cfg.train.seed, m)?;
        }
        Command::Infer { corpus, model } => {
            let mut cfg = read_config(config, InferConfig::default())?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            if cfg.samples == 0 {
                return Err(CliError::Config("samples must be positive".into()));
            }
            let mut m = Manifest::new("infer", cfg.seed, &cfg);
            let c = corpus_input(&corpus, "corpus", &mut m)?;
            m.input("model", &model)?;
            let model = load_model(&model)?;
            let mut entries = Vec::new();
            for (ri, r) in c.records.iter().enumerate() {
                let mut cache = StageCache::new(&model, r);
                for i in 0..cfg.samples {
                    let seed = derive_seed(cfg.seed, ri as u64, i as u64);
                    let scanpath = cache.run(cfg.mode, seed)?;
                    entries.push(ScanpathEntry { trial_id: r.trial_id.clone(), source: "model".into(), sample: i, scanpath });
                }
            }
            write_scanpaths(&entries, BufWriter::new(File::create(out.join("scanpaths.jsonl"))?))?;
            m.output("scanpaths.jsonl");
            m.write(out)?;
            let fixations: usize = entries.iter().map(|e| e.scanpath.num_fixations()).sum();
            println!("scanpaths {} mean fixations {:.3}", entries.len(), fixations as f64 / entries.len().max(1) as f64);
        }
        Command::Eval { corpus, model } => {
            let mut cfg = read_config(config, EvalCliConfig::default())?;
            cfg.eval.seed = cli.seed.unwrap_or(cfg.eval.seed);
            let mut m = Manifest::new("eval", cfg.eval.seed, &cfg);
            let c = corpus_input(&corpus, "corpus", &mut m)?;
            let model = match &model {
                Some(p) => {
                    m.input("model", p)?;
                    Some(load_model(p)?)
                }
                None => None,
            };
            let duration_ms = c
                .mean_fixation_ms()
                .ok_or_else(|| CliError::Data("corpus has no fixations".into()))?
                .round() as u32;
            let base = BaselineConfig { l_p: cfg.baseline_l_p, duration_ms };
            let model_source = model.as_ref().map(|model| {
                Source::Sampler(Box::new(move |r, seeds: &[u64]| {
                    let mut cache = StageCache::new(model, r);
                    seeds.iter().map(|&s| cache.run(InferMode::Sample, s).map_err(|e| e.to_string())).collect()
                }))
            });
            let random = Source::per_seed(|r, s| Ok(random_baseline(r, s, &base)));
            let bbox = Source::per_seed(|r, s| Ok(bbox_baseline(r, s, &base)));
            let mut sources: Vec<(&str, &Source<'_>)> = Vec::new();
            if let Some(s) = &model_source {
                sources.push(("model", s));
            }
            if cfg.baselines {
                sources.push(("random", &random));
                sources.push(("bbox", &bbox));
            }
            if cfg.gt_replay {
                sources.push(("gt_replay", &Source::GtReplay));
            }
            if sources.is_empty() {
                return Err(CliError::Config("nothing to evaluate: give --model or enable baselines".into()));
            }
            let report = evaluate(&sources, &c, &cfg.eval).map_err(CliError::Config)?;
            let mut w = BufWriter::new(File::create(out.join("report.json"))?);
            serde_json::to_writer_pretty(&mut w, &report.to_json()).map_err(std::io::Error::from)?;
            writeln!(w)?;
            w.flush()?;
            fs::write(out.join("report.csv"), report.to_csv())?;
            m.output("report.json");
            m.output("report.csv");
            m.write(out)?;
            print!("{}", report.to_table());
            for row in &report.rows {
                for f in &row.failures {
                    eprintln!("{}: {} failed: {}", row.source, f.trial_id, f.error);
                }
            }
        }
        Command::Render { corpus, scanpaths, trial } => {
            let cfg = read_config(config, RenderConfig::default())?;
            let mut m = Manifest::new("render", cli.seed.unwrap_or(0), &cfg);
            let c = corpus_input(&corpus, "corpus", &mut m)?;
            let generated = match &scanpaths {
                Some(p) => {
                    m.input("scanpaths", p)?;
                    read_scanpaths(BufReader::new(File::open(p)?), &c)?
                }
                None => Vec::new(),
            };
            let records: Vec<_> = c
                .records
                .iter()
                .filter(|r| trial.as_ref().is_none_or(|t| &r.trial_id == t))
                .take(cfg.max_records.unwrap_or(usize::MAX))
                .collect();
            if records.is_empty() {
                return Err(CliError::Data("no matching records".into()));
            }
            let colors = WordColors::default();
            let mut n = 0;
            for r in records {
                let id = file_stem(&r.trial_id);
                for h in &r.human_scanpaths {
                    let name = format!("{id}_human_{}.svg", file_stem(&h.subject));
                    fs::write(out.join(&name), render_svg(r, &h.scanpath, &colors))?;
                    m.output(&name);
                    n += 1;
                }
                for e in generated.iter().filter(|e| e.trial_id == r.trial_id) {
                    let name = format!("{id}_{}_{}.svg", file_stem(&e.source), e.sample);
                    fs::write(out.join(&name), render_svg(r, &e.scanpath, &colors))?;
                    m.output(&name);
                    n += 1;
                }
            }
            m.write(out)?;
            println!("rendered {n}");
        }
        Command::Gradcheck { corpus, model, record } => {
            let mut cfg = read_config(config, GradcheckConfig::default())?;
            cfg.train.seed = cli.seed.unwrap_or(cfg.train.seed);
            if cfg.per_tensor == 0 {
                return Err(CliError::Config("per_tensor must be positive".into()));
            }
            let mut m = Manifest::new("gradcheck", cfg.train.seed, &cfg);
            let c = corpus_input(&corpus, "corpus", &mut m)?;
            let r = c
                .records
                .get(record)
                .cloned()
                .ok_or_else(|| CliError::Data(format!("record {record} out of range ({} records)", c.len())))?;
            let one = c.with_records(vec![r]);
            let model = model_or_new(model.as_deref(), &cfg.model, &c, cfg.train.seed, &mut m)?;
            let probe = Probe::Sample { per_tensor: cfg.per_tensor, seed: cfg.train.seed };
            let report = grad_check_total_loss(&model, &one, &cfg.train, cfg.eps, &probe)?;
            let passed = report.max_rel_error < cfg.tolerance;
            let doc = json!({
                "max_rel_error": report.max_rel_error,
                "probes": report.probes,
                "tolerance": cfg.tolerance,
                "passed": passed,
                "worst": report.worst.as_ref().map(|w| json!({
                    "param": w.param, "index": w.index, "analytic": w.analytic, "numeric": w.numeric,
                })),
            });
            fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&doc).expect("serializes") + "\n")?;
            m.output("gradcheck.json");
            m.write(out)?;
            println!("probes {} max relative error {:.3e}", report.probes, report.max_rel_error);
            if !passed {
                return Err(CliError::Numeric(format!(
                    "max relative error {:.3e} exceeds {:.3e}",
                    report.max_rel_error, cfg.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn finish_run(
    model: &GazeModel,
    log: &refgaze_core::engine::RunLog,
    out: &Path,
    seed: u64,
    mut m: Manifest,
) -> Result<()> {
    save_model(model, out, seed, &mut m)?;
    log.write_jsonl(BufWriter::new(File::create(out.join("log.jsonl"))?))?;
    m.output("log.jsonl");
    m.write(out)?;
    if let Some(last) = log.epochs.last() {
        println!(
            "epochs {} loss {:.3} gaze {:.3} ground {:.3}",
            log.epochs.len(),
            last.loss.total,
            last.loss.l_gaze,
            last.loss.l_ground
        );
    }
    if let Some(best) = log.best_epoch {
        println!("best epoch {best}");
    }
    Ok(())
}

/// Keeps identifiers safe as file-name parts.
fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("refgaze: {e}");
            ExitCode::from(e.code())
        }
    }
}
