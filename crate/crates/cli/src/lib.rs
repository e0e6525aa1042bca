//! The `holdshift` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad or missing input data,
//! 3 failure while running. Log verbosity comes from `HOLDSHIFT_LOG`
//! (`error`, `warn`, `info`, `debug`, `trace`; default `info`).

pub mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use holdshift_core::attribution::{attribute_all, write_bins_csv, write_temporal_csv};
use holdshift_core::checkpoint::Checkpoint;
use holdshift_core::dataset::{read_recordings, read_samples, write_jsonl, write_recordings, write_samples, TurnSample};
use holdshift_core::frontend::Frontend;
use holdshift_core::inference::Predictor;
use holdshift_core::labels::label_corpus;
use holdshift_core::metrics::{format_results_row, ClassificationReport, LatencySummary};
use holdshift_core::streaming::{self, evaluate, replay, ReplayConfig, WallClock};
use holdshift_core::synth::{self_consistency, SyntheticTaskSpec};
use holdshift_core::train::{train, CheckpointKind, LogRecord, Split, TrainError, TrainSink};

pub use config::Settings;

pub const LOG_ENV: &str = "HOLDSHIFT_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

trait Classify<T> {
    fn data(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            kind: ExitKind::Data,
            error: e.into(),
        })
    }

    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            kind: ExitKind::Runtime,
            error: e.into(),
        })
    }
}

fn data_err(msg: String) -> CliError {
    CliError {
        kind: ExitKind::Data,
        error: anyhow!(msg),
    }
}

#[derive(Debug, Parser)]
#[command(name = "holdshift", version, about = "Hold/shift turn-taking detection from two-channel dialogue")]
pub struct Cli {
    /// Settings file (flat TOML); see holdshift.toml for every key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label two-channel VAD recordings into hold/shift samples.
    Label(LabelArgs),
    /// Generate a seeded synthetic dialogue corpus.
    Synth(SynthArgs),
    /// Train a model on labeled samples.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled samples.
    Eval(EvalArgs),
    /// Replay recordings frame by frame against a checkpoint.
    Stream(StreamArgs),
    /// Encoder contribution ratios and temporal attribution.
    Attribute(AttributeArgs),
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// VAD recordings JSONL.
    #[arg(long)]
    pub input: PathBuf,
    /// Output samples JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Machine-readable labeling report.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Fail when no sample is produced.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Generator settings (TOML); defaults otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n_recordings: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also render 16 kHz WAV audio per channel.
    #[arg(long)]
    pub audio: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Labeled samples JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub pos_weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// split.json written by `train`; required unless `--subset all`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub subset: Subset,
    /// Metrics JSON (no timing, so reruns are byte-identical).
    #[arg(long)]
    pub out: PathBuf,
    /// Latency summary JSON.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    /// Per-sample predictions JSONL.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// VAD recordings JSONL.
    #[arg(long)]
    pub recordings: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Stream seconds per clock second.
    #[arg(long, default_value_t = 1.0)]
    pub clock_factor: f64,
    /// Pace delivery on the wall clock instead of a virtual one.
    #[arg(long)]
    pub realtime: bool,
    /// Event log JSONL.
    #[arg(long)]
    pub events: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    pub summary: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` and runs the command. Help and version requests succeed.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError {
                kind: ExitKind::Usage,
                error: anyhow!(e.render().to_string().trim_start_matches("error: ").trim_end().to_string()),
            });
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref(), &cli.overrides).map_err(|error| CliError {
        kind: ExitKind::Usage,
        error,
    })?;
    match cli.command {
        Command::Label(a) => cmd_label(&a, &settings),
        Command::Synth(a) => cmd_synth(&a, &settings),
        Command::Train(a) => cmd_train(&a, settings),
        Command::Eval(a) => cmd_eval(&a, &settings),
        Command::Stream(a) => cmd_stream(&a, &settings),
        Command::Attribute(a) => cmd_attribute(&a, &settings),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).runtime()?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

fn load_samples(path: &Path) -> Result<Vec<TurnSample>, CliError> {
    let (samples, diags) = read_samples(path).data()?;
    if !diags.is_empty() {
        log::warn!("{}: skipped {} malformed lines", path.display(), diags.len());
    }
    Ok(samples)
}

fn load_predictor(path: &Path, settings: &Settings) -> Result<Predictor, CliError> {
    let ck = Checkpoint::<f32>::load(path).data()?;
    let mut p = Predictor::from_checkpoint(ck).data()?;
    p.threshold = settings.threshold as f32;
    Ok(p)
}

pub fn cmd_label(a: &LabelArgs, s: &Settings) -> Result<(), CliError> {
    let (recs, diags) = read_recordings(&a.input).data()?;
    for d in &diags {
        log::warn!("{}:{}: {}", a.input.display(), d.line, d.message);
    }
    if recs.is_empty() {
        log::warn!("{}: no recordings", a.input.display());
    }
    let (samples, stats) = label_corpus(&recs, &s.label_config());
    eprintln!("{stats}");
    if !diags.is_empty() {
        eprintln!("malformed lines skipped: {}", diags.len());
    }
    write_samples(&a.out, &samples).data()?;
    if let Some(p) = &a.stats {
        let mut j = stats.to_json();
        j["malformed_lines"] = diags.len().into();
        write_json(p, &j)?;
    }
    if samples.is_empty() {
        if a.strict {
            return Err(data_err("no samples produced".into()));
        }
        log::warn!("no samples produced");
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, s: &Settings) -> Result<(), CliError> {
    let mut spec: SyntheticTaskSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .data()?;
            toml::from_str(&text).context("invalid synthetic spec").data()?
        }
        None => SyntheticTaskSpec::default(),
    };
    if let Some(n) = a.n_recordings {
        spec.n_recordings = n;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.with_audio |= a.audio;
    create_dir(&a.out_dir)?;
    let mut recs = spec.generate().data()?;
    if spec.with_audio {
        for r in &mut recs {
            r.write_audio(&a.out_dir, spec.seed).runtime()?;
        }
    }
    let recordings: Vec<_> = recs.iter().map(|r| r.recording.clone()).collect();
    write_recordings(&a.out_dir.join("recordings.jsonl"), &recordings).runtime()?;
    #[derive(Serialize)]
    struct Planted<'a> {
        id: &'a str,
        decision_frame: usize,
        channel: holdshift_core::Channel,
        label: holdshift_core::TurnLabel,
    }
    let planted = recs.iter().flat_map(|r| {
        r.planted.iter().map(|p| Planted {
            id: &r.recording.id,
            decision_frame: p.decision_frame,
            channel: p.channel,
            label: p.label,
        })
    });
    write_jsonl(&a.out_dir.join("planted.jsonl"), planted).runtime()?;
    let consistency = self_consistency(&recs, &s.label_config());
    log::info!(
        "{} recordings, {} planted decision points ({:.1}% shift), labeler agreement {:.2}%",
        recs.len(),
        consistency.planted,
        100.0 * consistency.shift_fraction(),
        100.0 * consistency.rate()
    );
    write_json(
        &a.out_dir.join("synth_report.json"),
        &serde_json::json!({
            "spec": spec,
            "consistency": consistency,
            "agreement_rate": consistency.rate(),
            "shift_fraction": consistency.shift_fraction(),
        }),
    )
}

struct DirSink {
    dir: PathBuf,
    log: std::io::BufWriter<fs::File>,
}

impl TrainSink for DirSink {
    fn log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        use std::io::Write;
        let sink = |e: std::io::Error| TrainError::Sink(e.to_string());
        serde_json::to_writer(&mut self.log, record).map_err(|e| TrainError::Sink(e.to_string()))?;
        self.log.write_all(b"\n").map_err(sink)?;
        self.log.flush().map_err(sink)
    }

    fn checkpoint(&mut self, kind: CheckpointKind, ck: &Checkpoint<f32>) -> Result<(), TrainError> {
        let name = match kind {
            CheckpointKind::Best => "best.ckpt",
            CheckpointKind::Final => "final.ckpt",
            CheckpointKind::LastGood => "last_good.ckpt",
        };
        ck.save(&self.dir.join(name)).map_err(|e| TrainError::Sink(e.to_string()))
    }
}

pub fn cmd_train(a: &TrainArgs, mut s: Settings) -> Result<(), CliError> {
    macro_rules! flag {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { s.$f = v; })*};
    }
    flag!(lr_init, lr_min, weight_decay, batch_size, epochs, seed, val_fraction, pos_weight);
    let cfg = s.train_config();
    cfg.validate().map_err(|e| CliError {
        kind: ExitKind::Usage,
        error: e.into(),
    })?;
    let samples = load_samples(&a.data)?;
    if samples.is_empty() {
        return Err(data_err(format!("{}: no samples", a.data.display())));
    }
    create_dir(&a.out_dir)?;
    let split = Split::by_recording(&samples, cfg.val_fraction, cfg.seed).data()?;
    write_json(&a.out_dir.join("split.json"), &split)?;
    let log_path = a.out_dir.join("train_log.jsonl");
    let log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))
        .runtime()?;
    let mut sink = DirSink {
        dir: a.out_dir.clone(),
        log: std::io::BufWriter::new(log),
    };
    let frontend = Frontend::new(s.frontend_config());
    let t0 = Instant::now();
    let outcome = match train(&samples, &frontend, &s.model_config(), &cfg, &mut sink) {
        Ok(o) => o,
        Err(e @ (TrainError::EmptySplit(_) | TrainError::Frontend(_))) => return Err(e).data(),
        Err(e) => return Err(e).runtime(),
    };
    log::info!(
        "trained {} steps in {:.1}s; best epoch {} (val loss {:.5})",
        outcome.total_steps,
        t0.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.best_val_loss
    );
    Ok(())
}

fn select_subset(samples: Vec<TurnSample>, split: Option<&Path>, subset: Subset) -> Result<Vec<TurnSample>, CliError> {
    if subset == Subset::All {
        return Ok(samples);
    }
    let path = split.ok_or_else(|| CliError {
        kind: ExitKind::Usage,
        error: anyhow!("--subset train|val needs --split"),
    })?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .data()?;
    let split: Split = serde_json::from_str(&text).data()?;
    let ids: BTreeSet<&str> = match subset {
        Subset::Train => split.train_ids.iter().map(String::as_str).collect(),
        _ => split.val_ids.iter().map(String::as_str).collect(),
    };
    Ok(samples.into_iter().filter(|s| ids.contains(s.source_id.as_str())).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalMetrics {
    #[serde(flatten)]
    pub report: ClassificationReport,
    pub threshold: f64,
}

pub fn cmd_eval(a: &EvalArgs, s: &Settings) -> Result<(), CliError> {
    let predictor = load_predictor(&a.checkpoint, s)?;
    let samples = select_subset(load_samples(&a.data)?, a.split.as_deref(), a.subset)?;
    let events = streaming::batch_events(&predictor, &samples).runtime()?;
    let summary = match evaluate(&events) {
        Ok(v) => v,
        Err(e) => return Err(e).data(),
    };
    let metrics = EvalMetrics {
        report: summary.classification.clone(),
        threshold: s.threshold,
    };
    write_json(&a.out, &metrics)?;
    if let Some(p) = &a.timing {
        write_json(p, &serde_json::json!({ "latency_ms": summary.latency_ms }))?;
    }
    if let Some(p) = &a.predictions {
        write_jsonl(p, events.iter()).runtime()?;
    }
    println!(
        "{}",
        format_results_row(
            "holdshift",
            summary.classification.accuracy,
            summary.classification.f1,
            Some(summary.latency_ms.p50)
        )
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamReport {
    pub events: usize,
    /// Events without a consensus label, left out of the metrics.
    pub unlabeled: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub latency_ms: LatencySummary,
}

pub fn cmd_stream(a: &StreamArgs, s: &Settings) -> Result<(), CliError> {
    let predictor = load_predictor(&a.checkpoint, s)?;
    let (recs, diags) = read_recordings(&a.recordings).data()?;
    if !diags.is_empty() {
        log::warn!("{}: skipped {} malformed lines", a.recordings.display(), diags.len());
    }
    let cfg = ReplayConfig {
        clock_factor: a.clock_factor,
    };
    let labels = s.label_config();
    let events = if a.realtime {
        let mut all = Vec::new();
        for r in &recs {
            all.extend(replay(r, &predictor, &labels, &cfg, &mut WallClock::default()).data()?);
        }
        all
    } else {
        streaming::replay_all(&recs, &predictor, &labels, &cfg).data()?
    };
    write_jsonl(&a.events, events.iter()).runtime()?;
    let labeled: Vec<_> = events.iter().filter(|e| e.ground_truth.is_some()).cloned().collect();
    let summary = evaluate(&labeled).data()?;
    let out = StreamReport {
        events: events.len(),
        unlabeled: events.len() - labeled.len(),
        accuracy: summary.classification.accuracy,
        f1: summary.classification.f1,
        latency_ms: summary.latency_ms,
    };
    write_json(&a.summary, &out)?;
    println!(
        "{}",
        format_results_row("holdshift (stream)", out.accuracy, out.f1, Some(out.latency_ms.p50))
    );
    Ok(())
}

pub fn cmd_attribute(a: &AttributeArgs, s: &Settings) -> Result<(), CliError> {
    let predictor = load_predictor(&a.checkpoint, s)?;
    let mut samples = load_samples(&a.data)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(data_err(format!("{}: no samples", a.data.display())));
    }
    create_dir(&a.out_dir)?;
    let r = attribute_all(&predictor.frontend, &predictor.params, &predictor.config, &samples).runtime()?;
    if r.undefined > 0 {
        log::warn!("{} samples had zero gradient-activation mass in both streams", r.undefined);
    }
    let csv_file = |name: &str| {
        fs::File::create(a.out_dir.join(name))
            .with_context(|| format!("creating {name}"))
            .runtime()
    };
    write_bins_csv(csv_file("rho_bins.csv")?, &r.bins).runtime()?;
    let mut rows: Vec<(&str, &[f64])> = Vec::new();
    if let Some(v) = &r.linguistic_profile {
        rows.push(("linguistic", v));
    }
    if let Some(v) = &r.acoustic_profile {
        rows.push(("acoustic", v));
    }
    write_temporal_csv(csv_file("temporal.csv")?, &rows).runtime()?;
    write_json(&a.out_dir.join("attribution.json"), &r)?;
    for b in &r.bins {
        println!(
            "{:>5}  n={:<5} rho_linguistic={:.3} rho_acoustic={:.3}",
            b.bin.label(),
            b.count,
            b.rho_linguistic,
            b.rho_acoustic
        );
    }
    Ok(())
}
