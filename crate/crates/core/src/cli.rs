//! Command-line entry point.
//!
//! Every subcommand resolves its settings as built-in defaults, then an
//! optional JSON config file, then explicit flags, and writes the resolved
//! settings with input digests to `run.json` in its output directory. A
//! `run.json` can itself be passed back as `--config`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{efficiency_report, recon_report, write_recon_overlays};
use crate::hug::{encode_features, parse_leads, probe_train, ProbeConfig};
use crate::mask::{build_mask_matrix, sample_masked, EncoderPolicy, MaskSpec, Stage, TokenLayout, Variant};
use crate::model::{load_checkpoint, Checkpoint, ModelConfig};
use crate::pretrain::{fixed_masks, train, TrainConfig};
use crate::signal::{load_entry, load_manifest, Split};
use crate::synth::{generate_dataset, SynthClass, SynthConfig};
use crate::tokenizer::{build_dataset, Preprocess, TokenDataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "clearhug",
    version,
    about = "Sparse-mask ECG masked autoencoder and lead-group probe"
)]
struct Cli {
    /// Worker threads. Falls back to CLEARHUG_THREADS, then all cores.
    /// Results are bit-identical for a fixed thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Preprocess and tokenize a manifest into per-split token files.
    Tokenize(TokenizeArgs),
    /// Pretrain the masked autoencoder.
    Pretrain(PretrainArgs),
    /// Train a probe head on a frozen encoder.
    Probe(ProbeArgs),
    /// Compare checkpoints: reconstruction error, overlays and cost counts.
    Eval(EvalArgs),
    /// Dump one attention mask as CSV plus a row-size histogram.
    Masks(MasksArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config file (a previous run.json also works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of records.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sample_rate: Option<u32>,
    /// Seconds per record.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    wander_amp: Option<f64>,
    /// Class probabilities, e.g. `SINUS=0.5,TACHY=0.5`.
    #[arg(long)]
    class_mix: Option<String>,
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Beat tokens per lead.
    #[arg(long)]
    n_beats: Option<usize>,
    /// Samples per beat token.
    #[arg(long)]
    beat_len: Option<usize>,
    /// Resampling target in Hz.
    #[arg(long)]
    sample_rate: Option<u32>,
    /// record | lead | none
    #[arg(long)]
    scale_scope: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f32>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Tokenized training split.
    #[arg(long)]
    train: PathBuf,
    /// Tokenized validation split.
    #[arg(long)]
    val: PathBuf,
    /// Model size preset: toy | small | base.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// clear | no-ic | no-iv | no-ic-iv | full
    #[arg(long)]
    variant: Option<String>,
    /// paper-literal | consistent
    #[arg(long)]
    policy: Option<String>,
    /// masked | all
    #[arg(long)]
    loss_scope: Option<String>,
    /// Checkpoint every N epochs (0 = final only).
    #[arg(long)]
    save_every: Option<usize>,
    #[arg(long)]
    d_t: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    #[arg(long)]
    mlp_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,
    /// learned | zero
    #[arg(long)]
    mask_fill: Option<String>,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// hug | averaged | weighted | single-level
    #[arg(long)]
    head: Option<String>,
    /// mean | concat
    #[arg(long)]
    agg: Option<String>,
    /// Fraction of the training split to use.
    #[arg(long)]
    fraction: Option<f64>,
    /// Present leads, e.g. `I,II` (default all twelve).
    #[arg(long)]
    leads: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    standardize: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoints as `label=path`, comma separated; the first is the reference.
    #[arg(long, required = true)]
    checkpoints: String,
    /// Tokenized test split.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of records to draw overlays for.
    #[arg(long)]
    svg_limit: Option<usize>,
}

#[derive(Args, Debug)]
struct MasksArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
    /// Beat tokens per lead.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    policy: Option<String>,
    /// encoder | decoder
    #[arg(long)]
    stage: Option<String>,
    /// Valid beats per lead (default all).
    #[arg(long)]
    valid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("CLEARHUG_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("CLEARHUG_THREADS must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(a, threads),
        Command::Tokenize(a) => cmd_tokenize(a, threads),
        Command::Pretrain(a) => cmd_pretrain(a, threads),
        Command::Probe(a) => cmd_probe(a, threads),
        Command::Eval(a) => cmd_eval(a, threads),
        Command::Masks(a) => cmd_masks(a, threads),
    })
}

// Settings resolution.

/// Settings that are maps rather than sections; an override replaces them.
const MAP_SETTINGS: [&str; 1] = ["class_mix"];

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let slot = b.entry(k.clone()).or_insert(Value::Null);
                if MAP_SETTINGS.contains(&k.as_str()) {
                    *slot = v.clone();
                } else {
                    merge(slot, v);
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        row: e.line(),
        column: e.column(),
        message: format!("{}: {e}", path.display()),
    })
}

/// `defaults < config file < flags`. A config holding a `settings` key (a
/// previous `run.json`) contributes that object.
fn resolve<T: Serialize + DeserializeOwned>(
    defaults: T,
    config: Option<&Path>,
    flags: Map<String, Value>,
) -> Result<T> {
    let mut v = serde_json::to_value(defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = config {
        let mut file = read_json(p)?;
        if let Some(s) = file.get_mut("settings") {
            file = s.take();
        }
        if !file.is_object() {
            return Err(Error::Config(format!("{} is not a JSON object", p.display())));
        }
        merge(&mut v, &file);
    }
    merge(&mut v, &Value::Object(flags));
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid settings: {e}")))
}

/// Collects `Some` flag values into a (possibly nested) JSON object.
#[derive(Default)]
struct Flags(Map<String, Value>);

impl Flags {
    fn set<V: Serialize>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            let value = serde_json::to_value(v).expect("flag values serialize");
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            let mut obj = &mut self.0;
            for p in parts {
                obj = obj
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("nested flag object");
            }
            obj.insert(last.to_string(), value);
        }
        self
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct RunRecord<'a, S: Serialize> {
    subcommand: &'a str,
    version: &'a str,
    formats: BTreeMap<&'a str, u32>,
    threads: usize,
    output_dir: String,
    settings: &'a S,
    inputs: BTreeMap<String, String>,
}

fn write_run<S: Serialize>(
    out: &Path,
    subcommand: &str,
    threads: usize,
    settings: &S,
    inputs: BTreeMap<String, String>,
) -> Result<()> {
    let rec = RunRecord {
        subcommand,
        version: env!("CARGO_PKG_VERSION"),
        formats: [
            ("tokens", crate::tokenizer::TOKENS_VERSION),
            ("checkpoint", crate::model::CHECKPOINT_VERSION),
        ]
        .into(),
        threads,
        output_dir: out.display().to_string(),
        settings,
        inputs,
    };
    let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::Format(e.to_string()))?;
    let p = out.join("run.json");
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

// Subcommands.

fn parse_class_mix(s: &str) -> Result<BTreeMap<SynthClass, f64>> {
    let mut mix = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("class mix entry {part:?} is not CLASS=P")))?;
        let p: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad probability in {part:?}")))?;
        mix.insert(k.trim().parse::<SynthClass>()?, p);
    }
    Ok(mix)
}

fn cmd_synth(a: SynthArgs, threads: usize) -> Result<()> {
    let mix = a.class_mix.as_deref().map(parse_class_mix).transpose()?;
    let mut f = Flags::default();
    f.set("seed", a.seed)
        .set("n_records", a.n)
        .set("sample_rate", a.sample_rate)
        .set("duration", a.duration)
        .set("noise_std", a.noise_std)
        .set("wander_amp", a.wander_amp);
    let mut cfg: SynthConfig = resolve(SynthConfig::default(), a.common.config.as_deref(), f.0)?;
    if let Some(m) = mix {
        cfg.class_mix = m;
    }
    cfg.validate()?;
    create_dir(&a.common.out)?;
    let summary = generate_dataset(&cfg, &a.common.out)?;
    write_json(&a.common.out.join("summary.json"), &summary)?;
    let inputs = match &a.common.config {
        Some(p) => digests(&[p])?,
        None => BTreeMap::new(),
    };
    write_run(&a.common.out, "synth", threads, &cfg, inputs)?;
    println!(
        "wrote {} records ({} train / {} val / {} test) to {}",
        cfg.n_records,
        summary.n_train,
        summary.n_val,
        summary.n_test,
        a.common.out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct TokenizeSettings {
    n_beats: usize,
    beat_len: usize,
    preprocess: Preprocess,
}

impl Default for TokenizeSettings {
    fn default() -> Self {
        Self {
            n_beats: crate::tokenizer::DEFAULT_N_BEATS,
            beat_len: crate::tokenizer::DEFAULT_BEAT_LEN,
            preprocess: Preprocess::default(),
        }
    }
}

fn cmd_tokenize(a: TokenizeArgs, threads: usize) -> Result<()> {
    let mut f = Flags::default();
    f.set("n_beats", a.n_beats)
        .set("beat_len", a.beat_len)
        .set("preprocess.sample_rate", a.sample_rate)
        .set("preprocess.lo", a.lo)
        .set("preprocess.hi", a.hi);
    if let Some(s) = &a.scale_scope {
        let v = if s.eq_ignore_ascii_case("none") {
            Value::Null
        } else {
            Value::String(s.to_ascii_lowercase())
        };
        f.set("preprocess.scale", Some(v));
    }
    let cfg: TokenizeSettings = resolve(TokenizeSettings::default(), a.common.config.as_deref(), f.0)?;
    if cfg.n_beats == 0 || cfg.beat_len == 0 || cfg.n_beats > u16::MAX as usize || cfg.beat_len > u16::MAX as usize {
        return Err(Error::Config("n_beats and beat_len must lie in 1..=65535".into()));
    }
    let entries = load_manifest(&a.manifest)?;
    if entries.is_empty() {
        return Err(Error::Format("manifest lists no records".into()));
    }
    let classes: Vec<String> = entries
        .iter()
        .flat_map(|e| e.labels.iter().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    create_dir(&a.common.out)?;
    let mut hasher = Sha256::new();
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let records = entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let rec = load_entry(&a.manifest, e)?;
                hasher.update(rec.record_id.as_bytes());
                hasher.update(crate::signal::record_to_csv(&rec).as_bytes());
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = build_dataset(
            &records,
            &cfg.preprocess,
            cfg.n_beats,
            cfg.beat_len,
            Some(classes.clone()),
        )?;
        ds.save(&a.common.out.join(format!("{}.chtk", split.name())))?;
        counts.insert(split.name(), ds.records.len());
    }
    let mut inputs = digests(&[&a.manifest])?;
    inputs.insert("records".into(), hex::encode(hasher.finalize()));
    if let Some(p) = &a.common.config {
        inputs.extend(digests(&[p])?);
    }
    write_run(&a.common.out, "tokenize", threads, &cfg, inputs)?;
    println!("tokenized {counts:?} with classes {classes:?}");
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PretrainSettings {
    model: ModelConfig,
    train: TrainConfig,
}

fn preset(name: Option<&str>) -> Result<ModelConfig> {
    match name.map(|s| s.to_ascii_lowercase()).as_deref() {
        None | Some("base") => Ok(ModelConfig::default()),
        Some("toy") => Ok(ModelConfig::toy()),
        Some("small") => Ok(ModelConfig::small()),
        Some(other) => Err(Error::Config(format!("unknown preset {other:?} (toy|small|base)"))),
    }
}

fn cmd_pretrain(a: PretrainArgs, threads: usize) -> Result<()> {
    let defaults = PretrainSettings {
        model: preset(a.preset.as_deref())?,
        train: TrainConfig::default(),
    };
    let mut f = Flags::default();
    f.set("train.epochs", a.epochs)
        .set("train.warmup_epochs", a.warmup_epochs)
        .set("train.peak_lr", a.peak_lr)
        .set("train.min_lr", a.min_lr)
        .set("train.weight_decay", a.weight_decay)
        .set("train.batch_size", a.batch_size)
        .set("train.mask_ratio", a.mask_ratio)
        .set("train.seed", a.seed)
        .set("train.variant", a.variant)
        .set("train.policy", a.policy)
        .set("train.loss_scope", a.loss_scope)
        .set("train.save_every", a.save_every)
        .set("model.d_t", a.d_t)
        .set("model.n_heads", a.heads)
        .set("model.enc_layers", a.enc_layers)
        .set("model.dec_layers", a.dec_layers)
        .set("model.mlp_dim", a.mlp_dim)
        .set("model.dropout", a.dropout)
        .set("model.mask_fill", a.mask_fill);
    let mut s: PretrainSettings = resolve(defaults, a.common.config.as_deref(), f.0)?;
    let train_set = TokenDataset::load(&a.train)?;
    let val_set = TokenDataset::load(&a.val)?;
    // Token geometry always follows the data.
    s.model.n_beats = train_set.n_beats;
    s.model.beat_len = train_set.beat_len;
    s.model.validate()?;
    s.train.validate()?;
    create_dir(&a.common.out)?;
    let mut inputs = digests(&[&a.train, &a.val])?;
    if let Some(p) = &a.common.config {
        inputs.extend(digests(&[p])?);
    }
    write_run(&a.common.out, "pretrain", threads, &s, inputs)?;
    let out = train(&train_set, &val_set, &s.model, &s.train, Some(&a.common.out), |m| {
        eprintln!(
            "epoch {:>4} step {:>6} lr {:.3e} train {:.5} val {:.5}",
            m.epoch, m.step, m.lr, m.train_loss, m.val_masked_mse
        );
    })?;
    let last = out.metrics.last().expect("epoch-0 row");
    println!(
        "final val masked MSE {:.6} (epoch 0: {:.6}); checkpoint {}",
        last.val_masked_mse,
        out.metrics[0].val_masked_mse,
        a.common.out.join("final.chck").display()
    );
    Ok(())
}

fn cmd_probe(a: ProbeArgs, threads: usize) -> Result<()> {
    let encoder = a
        .encoder
        .clone()
        .ok_or_else(|| Error::Config("probe requires --encoder <checkpoint>".into()))?;
    let leads = a.leads.as_deref().map(parse_leads).transpose()?;
    let mut f = Flags::default();
    f.set("head", a.head)
        .set("agg", a.agg)
        .set("fraction", a.fraction)
        .set("leads", leads)
        .set("epochs", a.epochs)
        .set("warmup_epochs", a.warmup_epochs)
        .set("batch_size", a.batch_size)
        .set("peak_lr", a.peak_lr)
        .set("min_lr", a.min_lr)
        .set("weight_decay", a.weight_decay)
        .set("standardize", a.standardize)
        .set("seed", a.seed);
    let cfg: ProbeConfig = resolve(ProbeConfig::default(), a.common.config.as_deref(), f.0)?;
    cfg.validate()?;
    let ck = load_checkpoint(&encoder)?;
    let sets = [&a.train, &a.val, &a.test]
        .map(|p| TokenDataset::load(p))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let classes = sets[0].classes.clone();
    if sets.iter().any(|s| s.classes != classes) {
        return Err(Error::Format("splits disagree on the class list".into()));
    }
    let feats = sets
        .iter()
        .map(|s| encode_features(&ck, s))
        .collect::<Result<Vec<_>>>()?;
    let out = probe_train(&feats[0], &feats[1], &feats[2], &classes, &cfg)?;
    out.report.write(&a.common.out)?;
    let mut inputs = digests(&[&encoder, &a.train, &a.val, &a.test])?;
    if let Some(p) = &a.common.config {
        inputs.extend(digests(&[p])?);
    }
    write_run(&a.common.out, "probe", threads, &cfg, inputs)?;
    println!(
        "{} head: test macro AUC {:.4} (best epoch {}, {} training records)",
        cfg.head, out.report.macro_auc, out.report.best_epoch, out.report.n_train_used
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalSettings {
    mask_ratio: f64,
    seed: u64,
    svg_limit: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mask_ratio: 0.8,
            seed: 0,
            svg_limit: 8,
        }
    }
}

fn cmd_eval(a: EvalArgs, threads: usize) -> Result<()> {
    let mut f = Flags::default();
    f.set("mask_ratio", a.mask_ratio)
        .set("seed", a.seed)
        .set("svg_limit", a.svg_limit);
    let cfg: EvalSettings = resolve(EvalSettings::default(), a.common.config.as_deref(), f.0)?;
    let mut paths = Vec::new();
    let mut cks: Vec<(String, Checkpoint)> = Vec::new();
    for part in a.checkpoints.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (label, path) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint {part:?} is not label=path")))?;
        let path = PathBuf::from(path);
        cks.push((label.to_string(), load_checkpoint(&path)?));
        paths.push(path);
    }
    let test = TokenDataset::load(&a.test)?;
    create_dir(&a.common.out)?;
    let report = recon_report(&cks, &test, cfg.mask_ratio, cfg.seed)?;
    std::fs::write(a.common.out.join("recon.csv"), report.csv()).map_err(|e| Error::io(&a.common.out, e))?;
    write_recon_overlays(
        &cks,
        &test,
        cfg.mask_ratio,
        cfg.seed,
        cfg.svg_limit,
        &a.common.out.join("recon"),
    )?;

    let reference = &cks[0].1;
    let specs = fixed_masks(&test, cfg.mask_ratio, reference.variant, cfg.seed)?;
    let spec = specs.first().ok_or_else(|| Error::Format("test set is empty".into()))?;
    let efficiency: Vec<Value> = cks
        .iter()
        .map(|(label, ck)| {
            let e = efficiency_report(&ck.params.config, &spec.with_variant(ck.variant), ck.policy);
            json!({ "label": label, "variant": ck.variant.name(), "report": e })
        })
        .collect();
    write_json(&a.common.out.join("efficiency.json"), &efficiency)?;
    write_json(&a.common.out.join("metrics.json"), &json!({ "reconstruction": report }))?;

    let mut inputs = BTreeMap::new();
    for p in paths.iter().chain([&a.test]) {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    write_run(
        &a.common.out,
        "eval",
        threads,
        &json!({ "eval": cfg, "checkpoints": a.checkpoints }),
        inputs,
    )?;
    for r in &report.rows {
        println!(
            "{:<12} {:<9} masked MSE {:.6} (delta {:+.6})",
            r.label, r.variant, r.masked_mse, r.delta
        );
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct MasksSettings {
    n_beats: usize,
    ratio: f64,
    variant: Variant,
    policy: EncoderPolicy,
    stage: Stage,
    valid: Option<usize>,
    seed: u64,
}

impl Default for MasksSettings {
    fn default() -> Self {
        Self {
            n_beats: crate::tokenizer::DEFAULT_N_BEATS,
            ratio: 0.8,
            variant: Variant::Clear,
            policy: EncoderPolicy::PaperLiteral,
            stage: Stage::Decoder,
            valid: None,
            seed: 0,
        }
    }
}

fn cmd_masks(a: MasksArgs, threads: usize) -> Result<()> {
    let mut f = Flags::default();
    f.set("n_beats", a.n)
        .set("ratio", a.ratio)
        .set("variant", a.variant)
        .set("policy", a.policy)
        .set("stage", a.stage)
        .set("valid", a.valid)
        .set("seed", a.seed);
    let cfg: MasksSettings = resolve(MasksSettings::default(), a.config.as_deref(), f.0)?;
    if cfg.n_beats == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.ratio) {
        return Err(Error::Config("--ratio must lie in [0, 1]".into()));
    }
    let n_valid = cfg.valid.unwrap_or(cfg.n_beats);
    if n_valid == 0 || n_valid > cfg.n_beats {
        return Err(Error::Config(format!("--valid must lie in 1..={}", cfg.n_beats)));
    }
    let layout = TokenLayout::new(cfg.n_beats);
    let valid: Vec<bool> = (0..cfg.n_beats).map(|j| j < n_valid).collect();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let masked = sample_masked(layout, &valid, cfg.ratio, &mut rng);
    let spec = MaskSpec::new(layout, &valid, &masked, cfg.variant)?;
    let m = build_mask_matrix(&spec, cfg.stage, cfg.policy);
    let total = layout.total();
    let dense = m.to_layout_dense(total);
    let mut csv = String::new();
    for r in 0..total {
        let row: Vec<&str> = (0..total)
            .map(|c| if dense[r * total + c] { "1" } else { "0" })
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    create_dir(&a.out)?;
    let p = a.out.join("mask.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let hist: BTreeMap<String, usize> = m
        .row_size_histogram()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    write_json(
        &a.out.join("mask.json"),
        &json!({
            "positions": m.positions(),
            "masked": spec.masked_positions(),
            "row_size_histogram": hist,
            "pair_count": m.pair_count(),
        }),
    )?;
    let inputs = match &a.config {
        Some(p) => digests(&[p])?,
        None => BTreeMap::new(),
    };
    write_run(&a.out, "masks", threads, &cfg, inputs)?;
    println!(
        "{} x {} mask, {} allowed pairs, row sizes {:?}",
        total,
        total,
        m.pair_count(),
        m.row_size_histogram()
    );
    Ok(())
}
