//! Command-line front end: `gen`, `pretrain`, `eval` and `ablate`.
//!
//! Exit codes: 0 success, 2 usage error, 3 runtime failure. Every command
//! writes into a fresh `--out` directory (or an existing one with `--force`)
//! holding one `manifest.json` and a copy of the config it ran with.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{corpus_hash, generate_corpus, read_corpus, write_corpus, GenConfig, SyntheticSample};
use crate::error::Error;
use crate::eval::{
    self, default_prompts, ground_samples, linear_probe, miou, write_overlay, zero_shot_classify, AblationTable,
    EvalSuite, GroundingOptions, HeatmapMode, MetricsReport, SuiteSizes, PROBE_FRACTIONS,
};
use crate::seeds::{self, Stream};
use crate::train::Trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.qsvlm";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const OVERLAY_DIR: &str = "overlays";

/// Worker-thread cap for data generation and evaluation.
pub const THREADS_ENV: &str = "QSVLM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "qsvlm", version, about = "Four-scale vision-language pretraining on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen(GenArgs),
    /// Train a model on a corpus.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train and score every scale combination.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training config whose `[data]` section sets the generator.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Draw every image with a single motif kind.
    #[arg(long)]
    pub single_motif: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from this checkpoint up to the config's step budget.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Zeroshot,
    Ground,
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeatmapArg {
    Cosine,
    Attention,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub task: Task,
    /// Cap on evaluated items (grounding queries, or images otherwise).
    #[arg(long)]
    pub limit: Option<usize>,
    /// Seed for the probe split and label subsets; defaults to the checkpoint's.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = HeatmapArg::Cosine)]
    pub heatmap: HeatmapArg,
    /// Grounding threshold in standard deviations above the heatmap mean.
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of seeds, counting up from the config seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Held-out images per evaluation split.
    #[arg(long, default_value_t = 500)]
    pub eval_size: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Self-description of an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// Config file given on the command line, if any.
    pub config_path: Option<PathBuf>,
    /// SHA-256 of the config copy in the output directory.
    pub config_hash: String,
    pub seed: u64,
    /// Content hash of the corpus read or written.
    pub corpus_hash: Option<String>,
    pub out_dir: PathBuf,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub version: String,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses the process arguments and runs the command; returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, &argv),
        Command::Pretrain(a) => cmd_pretrain(a, &argv),
        Command::Eval(a) => cmd_eval(a, &argv),
        Command::Ablate(a) => cmd_ablate(a, &argv),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::debug!("thread pool already initialised; {THREADS_ENV} ignored");
            }
        }
        _ => log::warn!("ignoring {THREADS_ENV}={v:?}: expected a positive integer"),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Creates `dir`, refusing a non-empty one unless `force`, which clears it.
fn prepare_out(out: &OutArgs) -> CliResult<()> {
    let dir = &out.out;
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("--out {} is not a directory", dir.display())));
        }
        if fs::read_dir(dir)?.next().is_some() {
            if !out.force {
                return Err(usage(format!("--out {} is not empty; pass --force to replace it", dir.display())));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// The config from `path`, or the defaults, plus the text written to the
/// output directory.
fn load_config(path: Option<&Path>) -> CliResult<(TrainConfig, String)> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            let cfg = TrainConfig::from_toml_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok((cfg, text))
        }
        None => {
            let cfg = TrainConfig::default();
            let text = cfg.to_toml_string()?;
            Ok((cfg, text))
        }
    }
}

struct Run {
    manifest: RunManifest,
    dir: PathBuf,
}

impl Run {
    fn start(command: &str, argv: &[String], out: &OutArgs, config_path: Option<&Path>, config_text: &str, seed: u64) -> CliResult<Self> {
        prepare_out(out)?;
        fs::write(out.out.join(CONFIG_COPY), config_text)?;
        let run = Run {
            manifest: RunManifest {
                command: command.to_string(),
                args: argv.to_vec(),
                config_path: config_path.map(Path::to_path_buf),
                config_hash: sha256_hex(config_text.as_bytes()),
                seed,
                corpus_hash: None,
                out_dir: out.out.clone(),
                started_at: now(),
                finished_at: None,
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            dir: out.out.clone(),
        };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> CliResult<()> {
        fs::write(self.dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.finished_at = Some(now());
        self.write_manifest()
    }
}

/// Appends JSON lines, flushing after each one.
struct JsonLines(BufWriter<fs::File>);

impl JsonLines {
    fn create(path: &Path) -> CliResult<Self> {
        Ok(Self(BufWriter::new(fs::File::create(path)?)))
    }

    fn push<T: Serialize>(&mut self, value: &T) -> CliResult<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn read_data(dir: &Path) -> CliResult<(Vec<SyntheticSample>, String)> {
    if !dir.is_dir() {
        return Err(usage(format!("--data {} is not a corpus directory", dir.display())));
    }
    let samples = read_corpus(dir)?;
    Ok((samples, corpus_hash(dir)?))
}

fn cmd_gen(a: &GenArgs, argv: &[String]) -> CliResult<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let (cfg, text) = load_config(a.config.as_deref())?;
    let gen: GenConfig = if a.single_motif { cfg.data.single_motif() } else { cfg.data };
    let mut run = Run::start("gen", argv, &a.out, a.config.as_deref(), &text, a.seed)?;
    let samples = generate_corpus(a.n, &gen, a.seed)?;
    write_corpus(&run.dir, &samples)?;
    run.manifest.corpus_hash = Some(corpus_hash(&run.dir)?);
    log::info!("wrote {} samples to {}", samples.len(), run.dir.display());
    run.finish()
}

fn cmd_pretrain(a: &PretrainArgs, argv: &[String]) -> CliResult<()> {
    let (mut cfg, mut text) = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        text = cfg.to_toml_string()?;
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let mut theirs = ckpt.config.clone();
            theirs.steps = cfg.steps;
            if a.config.is_some() && theirs != cfg {
                return Err(usage(format!(
                    "--config differs from the config stored in {} in more than `steps`",
                    p.display()
                )));
            }
            if a.config.is_none() {
                cfg = ckpt.config.clone();
                text = cfg.to_toml_string()?;
            }
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            t.set_total_steps(cfg.steps);
            log::info!("resuming from step {}", t.step());
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let (corpus, hash) = read_data(&a.data)?;
    if let Some(s) = corpus.iter().find(|s| s.size != cfg.model.image_size) {
        return Err(usage(format!(
            "corpus image {} is {}px but the model expects {}px",
            s.index, s.size, cfg.model.image_size
        )));
    }
    let mut run = Run::start("pretrain", argv, &a.out, a.config.as_deref(), &text, cfg.seed)?;
    run.manifest.corpus_hash = Some(hash);
    run.write_manifest()?;
    let mut log = JsonLines::create(&run.dir.join(METRICS_FILE))?;
    trainer
        .run(&corpus, |rec| log.push(rec).map_err(|e| match e {
            CliError::Runtime(e) => e,
            CliError::Usage(m) => Error::invalid(m),
        }))
        .map_err(|e| {
            if let Ok(c) = trainer.checkpoint() {
                let _ = save_checkpoint(&c, &run.dir.join("last_good.qsvlm"));
            }
            CliError::Runtime(e)
        })?;
    save_checkpoint(&trainer.checkpoint()?, &run.dir.join(CHECKPOINT_FILE))?;
    run.finish()
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    if a.limit == Some(0) {
        return Err(usage("--limit must be at least 1"));
    }
    if !(a.k.is_finite()) {
        return Err(usage("--k must be finite"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (mut samples, hash) = read_data(&a.data)?;
    if let Some(s) = samples.iter().find(|s| s.size != ckpt.config.model.image_size) {
        return Err(usage(format!(
            "corpus image {} is {}px but the checkpoint model expects {}px",
            s.index, s.size, ckpt.config.model.image_size
        )));
    }
    let seed = a.seed.unwrap_or(ckpt.config.seed);
    let text = ckpt.config.to_toml_string()?;
    let mut run = Run::start("eval", argv, &a.out, None, &text, seed)?;
    run.manifest.corpus_hash = Some(hash);
    run.write_manifest()?;
    let model = ckpt.to_model()?;
    let mut reports = JsonLines::create(&run.dir.join(REPORT_FILE))?;
    let config = Some(ckpt.config.clone());
    match a.task {
        Task::Zeroshot => {
            let total = samples.len();
            samples.retain(|s| s.single_class().is_some());
            if samples.is_empty() {
                return Err(usage("zero-shot needs single-motif images; the corpus has none"));
            }
            if let Some(l) = a.limit {
                samples.truncate(l);
            }
            let r = zero_shot_classify(&model, &samples, &default_prompts())?;
            let mut rep = MetricsReport::new("zeroshot", seed, config).with_class_auc("auc", &r.per_class_auc);
            rep.items = samples.len();
            rep.set("accuracy", r.accuracy);
            rep.set("auc", r.auc);
            rep.note("prompts: \"there is a <motif>.\"; score: inner product of global embeddings; auc: one-vs-rest macro mean");
            if samples.len() < total {
                rep.note(&format!("{} multi-motif images skipped", total - samples.len()));
            }
            reports.push(&rep)?;
        }
        Task::Ground => {
            let opts = GroundingOptions {
                mode: match a.heatmap {
                    HeatmapArg::Cosine => HeatmapMode::Cosine,
                    HeatmapArg::Attention => HeatmapMode::Attention,
                },
                k: a.k,
                tau_att: ckpt.config.temperature.tau_att,
            };
            let results = ground_samples(&model, &samples, &opts, a.limit)?;
            let overlays = run.dir.join(OVERLAY_DIR);
            fs::create_dir_all(&overlays)?;
            let mut items = JsonLines::create(&run.dir.join("grounding.jsonl"))?;
            for r in &results {
                let sample = samples.iter().find(|s| s.index == r.sample).expect("result comes from the corpus");
                write_overlay(&overlays, sample, r)?;
                items.push(r)?;
            }
            let ious: Vec<f64> = results.iter().map(|r| r.iou).collect();
            let mut rep = MetricsReport::new("ground", seed, config);
            rep.items = results.len();
            rep.set("miou", miou(&ious)?);
            rep.set("cnr", results.iter().map(|r| r.cnr).sum::<f64>() / results.len() as f64);
            rep.note(&format!(
                "heatmap: {:?}; region: patches above mean + {} std; cnr: (mu_in - mu_out) / sqrt((var_in + var_out) / 2) on the pixel heatmap",
                opts.mode, opts.k
            ));
            reports.push(&rep)?;
        }
        Task::Probe => {
            samples.retain(|s| s.single_class().is_some());
            if let Some(l) = a.limit {
                samples.truncate(l);
            }
            if samples.len() < 2 {
                return Err(usage("the probe needs at least two single-motif images"));
            }
            let (pool, test) = split_pool_test(samples, seed);
            let mut ok = 0;
            for fraction in PROBE_FRACTIONS {
                let mut rep = MetricsReport::new("probe", seed, config.clone());
                rep.set("fraction", fraction);
                match linear_probe(&model, &pool, &test, fraction, seed) {
                    Ok(r) => {
                        ok += 1;
                        rep = rep.with_class_auc("auc", &r.per_class_auc);
                        rep.items = test.len();
                        rep.set("auc", r.auc);
                        rep.set("accuracy", r.accuracy);
                        rep.set("n_train", r.n_train as f64);
                    }
                    Err(e) => rep.note(&format!("failed: {e}")),
                }
                reports.push(&rep)?;
            }
            if ok == 0 {
                return Err(CliError::Runtime(Error::invalid("every probe fraction failed")));
            }
        }
    }
    run.finish()
}

/// Deterministic two-thirds / one-third split of a labeled corpus.
fn split_pool_test(mut samples: Vec<SyntheticSample>, seed: u64) -> (Vec<SyntheticSample>, Vec<SyntheticSample>) {
    use rand::seq::SliceRandom;
    samples.shuffle(&mut seeds::rng(seed, Stream::EvalSplit, u64::MAX));
    let test = samples.split_off(samples.len() * 2 / 3);
    (samples, test)
}

fn cmd_ablate(a: &AblateArgs, argv: &[String]) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if a.eval_size == 0 {
        return Err(usage("--eval-size must be at least 1"));
    }
    let (base, text) = load_config(a.config.as_deref())?;
    let (corpus, hash) = read_data(&a.data)?;
    let mut run = Run::start("ablate", argv, &a.out, a.config.as_deref(), &text, base.seed)?;
    run.manifest.corpus_hash = Some(hash);
    run.write_manifest()?;
    let mut rows = JsonLines::create(&run.dir.join("ablation.jsonl"))?;
    let mut tables = Vec::new();
    for k in 0..a.seeds {
        let cfg = TrainConfig {
            seed: base.seed + k,
            ..base.clone()
        };
        let suite = EvalSuite::generate(
            &cfg.data,
            cfg.seed,
            SuiteSizes {
                zero_shot: a.eval_size,
                grounding: 0,
                probe_pool: 2 * a.eval_size,
                probe_test: a.eval_size,
            },
        )?;
        let table = eval::run_ablation(&cfg, &corpus, &suite)?;
        for r in &table.rows {
            rows.push(&serde_json::json!({ "seed": cfg.seed, "row": r }))?;
        }
        fs::write(run.dir.join(format!("table_seed{}.txt", cfg.seed)), table.to_text())?;
        fs::write(run.dir.join(format!("table_seed{}.json", cfg.seed)), serde_json::to_string_pretty(&table)?)?;
        print!("{}", table.to_text());
        tables.push(table);
    }
    let agg = AblationTable::mean(&tables)?;
    fs::write(run.dir.join("aggregate.txt"), agg.to_text())?;
    fs::write(run.dir.join("aggregate.json"), serde_json::to_string_pretty(&agg)?)?;
    if tables.len() > 1 {
        print!("{}", agg.to_text());
    }
    if tables.iter().all(|t| t.failures() == t.rows.len()) {
        run.finish()?;
        return Err(CliError::Runtime(Error::invalid("every ablation row failed")));
    }
    run.finish()
}

/// Reads the manifest of an output directory.
pub fn read_manifest(dir: &Path) -> crate::Result<RunManifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
}

/// Loads the final checkpoint a `pretrain` run wrote.
pub fn pretrain_checkpoint(dir: &Path) -> crate::Result<Checkpoint> {
    load_checkpoint(&dir.join(CHECKPOINT_FILE))
}
