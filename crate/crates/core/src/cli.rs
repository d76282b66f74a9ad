//! `aquanet` command line: extract, split, detect, evaluate, serve, report.
//!
//! Numeric knobs resolve as command-line flag, then `AQUANET_*` environment
//! variable, then `--config` JSON file, then built-in default.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{ClassTable, DatasetError, DatasetManifest, ParseMode, SplitMode, SplitResult};
use crate::inference::{
    load_model_backend, DetectParams, Detector, DetectorBackend, InferenceError, ModelDescriptor, StubDetector,
    StubDetectorConfig, ThresholdStage,
};
use crate::metrics::{
    evaluate, read_predictions, render_report, write_predictions, EvalConfig, EvaluationReport, MetricsError,
    Predictions,
};
use crate::stream::{
    self, AnnotatedFrameSink, Backpressure, BroadcastConfig, EventSink, FramePacket, FrameSource, JsonLinesSink,
    PipelineConfig, PipelineError, StreamError,
};
use crate::{
    DEFAULT_CONFIDENCE, DEFAULT_INTERVAL_S, DEFAULT_MATCH_IOU, DEFAULT_NMS_IOU, DEFAULT_QUEUE_CAPACITY,
    DEFAULT_SPLIT_RATIO,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("error[usage]: {0}")]
    Usage(String),
    #[error("error[data]: {0}")]
    Data(String),
    #[error("error[io]: {0}")]
    Io(String),
    #[error("error[source]: {0}")]
    Source(String),
    #[error("error[backend]: {0}")]
    Backend(String),
    #[error("error[pipeline]: {0}")]
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) | CliError::Source(_) => 2,
            CliError::Backend(_) | CliError::Pipeline(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            DatasetError::InvalidRatio(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Configuration(_) => CliError::Data(e.to_string()),
            InferenceError::FrameDecode(_) => CliError::Data(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::InvalidInterval(_) | StreamError::Config(_) => CliError::Usage(e.to_string()),
            StreamError::Io { .. } => CliError::Io(e.to_string()),
            StreamError::Source(_) => CliError::Source(e.to_string()),
            StreamError::Bind { .. } => CliError::Pipeline(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitModeArg {
    Random,
    Sequential,
}

impl From<SplitModeArg> for SplitMode {
    fn from(m: SplitModeArg) -> Self {
        match m {
            SplitModeArg::Random => SplitMode::Random,
            SplitModeArg::Sequential => SplitMode::Sequential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    DropOldest,
    Block,
}

impl From<PolicyArg> for Backpressure {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::DropOldest => Backpressure::DropOldest,
            PolicyArg::Block => Backpressure::Block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    BeforeNms,
    AfterNms,
}

impl From<StageArg> for ThresholdStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::BeforeNms => ThresholdStage::BeforeNms,
            StageArg::AfterNms => ThresholdStage::AfterNms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
    All,
}

#[derive(Debug, Parser)]
#[command(name = "aquanet", version, about = "Net-pen defect detection: frame extraction, dataset split, detection, evaluation and live event streaming")]
pub struct Cli {
    #[command(flatten)]
    pub knobs: KnobArgs,

    /// JSON config file supplying knob values not given as flags or env vars
    #[arg(long, global = true, env = "AQUANET_CONFIG")]
    pub config: Option<PathBuf>,

    /// Print the resolved configuration as JSON and exit
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct KnobArgs {
    /// Seconds between extracted frames
    #[arg(long = "interval", global = true, env = "AQUANET_INTERVAL_S", default_value_t = DEFAULT_INTERVAL_S)]
    pub interval_s: f64,

    /// Fraction of images assigned to the training split
    #[arg(long, global = true, env = "AQUANET_RATIO", default_value_t = DEFAULT_SPLIT_RATIO)]
    pub ratio: f64,

    /// Split shuffle seed
    #[arg(long, global = true, env = "AQUANET_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Confidence threshold (inclusive)
    #[arg(long, global = true, env = "AQUANET_CONFIDENCE", default_value_t = DEFAULT_CONFIDENCE)]
    pub confidence: f64,

    /// IoU above which NMS suppresses a same-class box
    #[arg(long, global = true, env = "AQUANET_NMS_IOU", default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,

    /// IoU a detection needs to match a ground-truth box
    #[arg(long, global = true, env = "AQUANET_MATCH_IOU", default_value_t = DEFAULT_MATCH_IOU)]
    pub match_iou: f64,

    /// Frames buffered between reader and detection workers
    #[arg(long, global = true, env = "AQUANET_QUEUE_CAPACITY", default_value_t = DEFAULT_QUEUE_CAPACITY)]
    pub queue_capacity: usize,

    /// Split strategy
    #[arg(long, global = true, value_enum, default_value_t = SplitModeArg::Random)]
    pub split_mode: SplitModeArg,

    /// Queue policy when detection falls behind the source
    #[arg(long, global = true, value_enum, default_value_t = PolicyArg::DropOldest)]
    pub policy: PolicyArg,

    /// Apply the confidence threshold before or after NMS
    #[arg(long, global = true, value_enum, default_value_t = StageArg::BeforeNms)]
    pub threshold_stage: StageArg,

    /// Skip malformed label lines instead of failing
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Sample frames from a video or frame directory at a fixed interval
    Extract(ExtractArgs),
    /// Split a manifest into train and test sets
    Split(SplitArgs),
    /// Run a detector over manifest images and write a predictions file
    Detect(DetectArgs),
    /// Score prediction files against manifest labels
    Evaluate(EvaluateArgs),
    /// Run the live pipeline and broadcast detection events over TCP
    Serve(ServeArgs),
    /// Render a stored evaluation report
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Extract(_) => "extract",
            Command::Split(_) => "split",
            Command::Detect(_) => "detect",
            Command::Evaluate(_) => "evaluate",
            Command::Serve(_) => "serve",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExtractArgs {
    /// Video file, stream URL or frame directory
    #[arg(long)]
    pub video: PathBuf,
    /// Output directory for frames and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    /// Override the source frame rate
    #[arg(long)]
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the split JSON here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(id = "backend", required = true, multiple = false)]
pub struct BackendArgs {
    /// Stub detector config (JSON)
    #[arg(long, group = "backend")]
    pub stub: Option<PathBuf>,
    /// Model descriptor (JSON) for an ONNX detector
    #[arg(long, group = "backend")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SubsetArgs {
    /// Split JSON restricting which images are used
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Part of the split to use
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub subset: SubsetArgs,
    /// Predictions file to write (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

fn parse_named_path(s: &str) -> Result<NamedPath, String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok(NamedPath {
            name: name.to_string(),
            path: path.into(),
        }),
        Some(_) => Err(format!("expected NAME=PATH, got {s:?}")),
        None => {
            let path = PathBuf::from(s);
            let name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| format!("cannot derive a model name from {s:?}"))?;
            Ok(NamedPath { name, path })
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions file as NAME=PATH (repeatable; NAME defaults to the file stem)
    #[arg(long = "predictions", required = true, value_parser = parse_named_path)]
    pub predictions: Vec<NamedPath>,
    #[command(flatten)]
    pub subset: SubsetArgs,
    /// Directory for report.json, report.txt and curve CSVs
    #[arg(long)]
    pub out: PathBuf,
    /// Points on the uniform part of the confidence sweep
    #[arg(long, default_value_t = 101)]
    pub curve_samples: usize,
    /// Dataset label recorded in the report
    #[arg(long, default_value = "dataset")]
    pub dataset: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    /// Frame directory, video file or stream URL
    #[arg(long)]
    pub source: PathBuf,
    /// Override the source frame rate
    #[arg(long)]
    pub fps: Option<f64>,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// TCP address for the event feed
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub bind: String,
    /// Detection worker threads (default: available cores, at most 4)
    #[arg(long)]
    pub workers: Option<usize>,
    /// Also append events to this JSON-lines file
    #[arg(long)]
    pub events_out: Option<PathBuf>,
    /// Also write annotated frames to this directory
    #[arg(long)]
    pub annotated_out: Option<PathBuf>,
    /// Write final pipeline statistics here as JSON
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    /// Bytes a slow client may have queued before it is disconnected
    #[arg(long, default_value_t = 1 << 20)]
    pub max_client_buffer: usize,
    /// Wait for this many clients before reading frames
    #[arg(long, default_value_t = 0)]
    pub wait_clients: usize,
    /// Give up waiting for clients after this many seconds
    #[arg(long, default_value_t = 30.0)]
    pub wait_timeout: f64,
    /// Deliver frames no faster than the source frame rate
    #[arg(long)]
    pub pace: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// report.json written by `evaluate`
    #[arg(long)]
    pub input: PathBuf,
    /// Also write report.txt and curve CSVs here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    interval_s: Option<f64>,
    ratio: Option<f64>,
    seed: Option<u64>,
    confidence: Option<f64>,
    nms_iou: Option<f64>,
    match_iou: Option<f64>,
    queue_capacity: Option<usize>,
    split_mode: Option<SplitModeArg>,
    policy: Option<PolicyArg>,
    threshold_stage: Option<StageArg>,
    lenient: Option<bool>,
}

/// Fully resolved invocation.
#[derive(Debug, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub interval_s: f64,
    pub ratio: f64,
    pub seed: u64,
    pub confidence: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub queue_capacity: usize,
    pub split_mode: SplitModeArg,
    pub policy: PolicyArg,
    pub threshold_stage: StageArg,
    pub lenient: bool,
    pub config_file: Option<PathBuf>,
    pub args: Command,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(self.interval_s > 0.0 && self.interval_s.is_finite()) {
            return bad(format!("--interval must be > 0 (got {})", self.interval_s));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("--ratio must be in (0, 1) (got {})", self.ratio));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return bad(format!("--confidence must be in [0, 1] (got {})", self.confidence));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return bad(format!("--nms-iou must be in [0, 1] (got {})", self.nms_iou));
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return bad(format!("--match-iou must be in (0, 1] (got {})", self.match_iou));
        }
        if self.queue_capacity == 0 {
            return bad("--queue-capacity must be >= 1".into());
        }
        if let Command::Evaluate(a) = &self.args {
            if a.curve_samples < 2 {
                return bad("--curve-samples must be >= 2".into());
            }
        }
        if let Command::Serve(a) = &self.args {
            if a.workers == Some(0) {
                return bad("--workers must be >= 1".into());
            }
        }
        Ok(())
    }

    fn detect_params(&self) -> DetectParams {
        DetectParams {
            confidence: self.confidence,
            nms_iou: self.nms_iou,
            threshold_stage: self.threshold_stage.into(),
        }
    }

    fn parse_mode(&self) -> ParseMode {
        if self.lenient {
            ParseMode::Lenient
        } else {
            ParseMode::Strict
        }
    }
}

fn value_source(m: &ArgMatches, id: &str) -> Option<ValueSource> {
    let mut best = m.value_source(id);
    let mut cur = m;
    while let Some((_, sub)) = cur.subcommand() {
        if let Some(s) = sub.value_source(id) {
            if best.is_none_or(|b| s > b) {
                best = Some(s);
            }
        }
        cur = sub;
    }
    best
}

fn resolve(matches: &ArgMatches, cli: Cli) -> Result<RunConfig, CliError> {
    let file: ConfigFile = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => ConfigFile::default(),
    };
    let k = cli.knobs;
    macro_rules! pick {
        ($id:literal, $flag:expr, $file:expr) => {
            match (value_source(matches, $id), $file) {
                (Some(ValueSource::DefaultValue) | None, Some(v)) => v,
                _ => $flag,
            }
        };
    }
    let rc = RunConfig {
        command: cli.command.name(),
        interval_s: pick!("interval_s", k.interval_s, file.interval_s),
        ratio: pick!("ratio", k.ratio, file.ratio),
        seed: pick!("seed", k.seed, file.seed),
        confidence: pick!("confidence", k.confidence, file.confidence),
        nms_iou: pick!("nms_iou", k.nms_iou, file.nms_iou),
        match_iou: pick!("match_iou", k.match_iou, file.match_iou),
        queue_capacity: pick!("queue_capacity", k.queue_capacity, file.queue_capacity),
        split_mode: pick!("split_mode", k.split_mode, file.split_mode),
        policy: pick!("policy", k.policy, file.policy),
        threshold_stage: pick!("threshold_stage", k.threshold_stage, file.threshold_stage),
        lenient: pick!("lenient", k.lenient, file.lenient),
        config_file: cli.config,
        args: cli.command,
    };
    rc.validate()?;
    Ok(rc)
}

/// Parses `args` (including the program name) into a resolved config.
/// Help and version requests come back as `Ok(Err(text))`.
pub fn parse_args<I, T>(args: I) -> Result<Result<RunConfig, String>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    Ok(Err(e.render().to_string()))
                }
                _ => {
                    let text = e.render().to_string();
                    let first = text.lines().next().unwrap_or("invalid arguments");
                    Err(CliError::Usage(first.trim_start_matches("error: ").to_string()))
                }
            };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    let print = cli.print_config;
    let rc = resolve(&matches, cli)?;
    if print {
        return Ok(Err(serde_json::to_string_pretty(&rc).expect("config serializes") + "\n"));
    }
    Ok(Ok(rc))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match parse_args(args) {
        Ok(Err(text)) => {
            let _ = out.write_all(text.as_bytes());
            return 0;
        }
        Ok(Ok(rc)) => execute(&rc, &mut out),
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(rc: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match &rc.args {
        Command::Extract(a) => cmd_extract(rc, a, out),
        Command::Split(a) => cmd_split(rc, a, out),
        Command::Detect(a) => cmd_detect(rc, a, out),
        Command::Evaluate(a) => cmd_evaluate(rc, a, out),
        Command::Serve(a) => cmd_serve(rc, a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}

fn cmd_extract(rc: &RunConfig, a: &ExtractArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut manifest = stream::extract_frames(&a.video, rc.interval_s, &a.out, a.fps, &ClassTable::net_defects())?;
    for e in &mut manifest.entries {
        e.image_path = e.image_path.file_name().map(PathBuf::from).unwrap_or_default();
        e.label_path = e.label_path.file_name().map(PathBuf::from).unwrap_or_default();
    }
    let path = a.out.join("manifest.json");
    std::fs::write(&path, manifest.to_json() + "\n").map_err(io_err(&path))?;
    say(out, &format!("extracted {} frames; manifest {}\n", manifest.entries.len(), path.display()))
}

fn cmd_split(rc: &RunConfig, a: &SplitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let split = crate::annotations::split_dataset(&manifest, rc.ratio, rc.seed, rc.split_mode.into())?;
    let json = split.to_json();
    match &a.out {
        Some(p) => {
            std::fs::write(p, &json).map_err(io_err(p))?;
            say(out, &format!("train {} / test {} → {}\n", split.train.len(), split.test.len(), p.display()))
        }
        None => say(out, &json),
    }
}

fn load_split(path: &Path) -> Result<SplitResult, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Image ids selected by `--split/--subset`, in manifest order.
fn subset_ids(manifest: &DatasetManifest, s: &SubsetArgs) -> Result<Vec<String>, CliError> {
    let Some(path) = &s.split else {
        return Ok(manifest.ids());
    };
    let split = load_split(path)?;
    let chosen: std::collections::HashSet<&String> = match s.subset {
        Subset::Train => split.train.iter().collect(),
        Subset::Test => split.test.iter().collect(),
        Subset::All => split.train.iter().chain(&split.test).collect(),
    };
    for id in &chosen {
        if manifest.entry(id).is_none() {
            return Err(CliError::Data(format!("{}: image {id:?} is not in the manifest", path.display())));
        }
    }
    Ok(manifest.ids().into_iter().filter(|id| chosen.contains(id)).collect())
}

fn load_stub(path: &Path) -> Result<StubDetector, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg: StubDetectorConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if cfg.ground_truth_source.is_relative() {
        if let Some(base) = path.parent() {
            cfg.ground_truth_source = base.join(&cfg.ground_truth_source);
        }
    }
    Ok(StubDetector::from_config(&cfg)?)
}

fn load_backend(b: &BackendArgs) -> Result<Arc<dyn DetectorBackend>, CliError> {
    match (&b.stub, &b.model) {
        (Some(stub), _) => Ok(Arc::new(load_stub(stub)?)),
        (None, Some(model)) => Ok(load_model_backend(&ModelDescriptor::load(model)?)?),
        (None, None) => Err(CliError::Usage("one of --stub or --model is required".into())),
    }
}

fn cmd_detect(rc: &RunConfig, a: &DetectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ids = subset_ids(&manifest, &a.subset)?;
    let detector = Detector::new(load_backend(&a.backend)?, &manifest.classes, rc.detect_params())?;
    let results: Vec<(String, Vec<_>)> = ids
        .par_iter()
        .map(|id| {
            let e = manifest.entry(id).expect("subset ids come from the manifest");
            let img = image::open(&e.image_path)
                .map_err(|err| CliError::Data(format!("{}: {err}", e.image_path.display())))?
                .to_rgb8();
            if (img.width(), img.height()) != (e.width, e.height) {
                return Err(CliError::Data(format!(
                    "{}: image is {}x{} but the manifest says {}x{}",
                    e.image_path.display(),
                    img.width(),
                    img.height(),
                    e.width,
                    e.height
                )));
            }
            let frame = FramePacket::from_rgb("manifest", id, 0, 0, img);
            Ok((id.clone(), detector.detect(&frame)?))
        })
        .collect::<Result<_, CliError>>()?;
    let n: usize = results.iter().map(|(_, d)| d.len()).sum();
    let preds: Predictions = results.into_iter().collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(&a.out, write_predictions(&preds)).map_err(io_err(&a.out))?;
    say(out, &format!("{} detections over {} images → {}\n", n, preds.len(), a.out.display()))
}

fn cmd_evaluate(rc: &RunConfig, a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let ids = subset_ids(&manifest, &a.subset)?;
    let gts = manifest.load_ground_truth(rc.parse_mode())?.restrict_to(&ids);
    if !gts.skipped.is_empty() {
        log::warn!("{} malformed label lines skipped", gts.skipped.len());
    }
    let cfg = EvalConfig {
        match_iou: rc.match_iou,
        confidence_threshold: rc.confidence,
        curve_samples: a.curve_samples,
    };
    let mut report = EvaluationReport::new(a.dataset.clone(), &cfg);
    for np in &a.predictions {
        let text = std::fs::read_to_string(&np.path).map_err(io_err(&np.path))?;
        let mut preds = read_predictions(&text, &ids)
            .map_err(|e| CliError::Data(format!("{}: {e}", np.path.display())))?;
        if let Some(unknown) = preds.keys().find(|k| manifest.entry(k).is_none()) {
            return Err(CliError::Data(format!("{}: image {unknown:?} is not in the manifest", np.path.display())));
        }
        preds.retain(|k, _| gts.images.contains_key(k));
        report.detectors.push(evaluate(&np.name, &preds, &gts, &cfg)?);
    }
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let json_path = a.out.join("report.json");
    std::fs::write(&json_path, report.to_json() + "\n").map_err(io_err(&json_path))?;
    let rendered = render_report(&report);
    rendered.write_to(&a.out).map_err(io_err(&a.out))?;
    say(out, &rendered.table)
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.input).map_err(io_err(&a.input))?;
    let report: EvaluationReport =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.input.display())))?;
    let rendered = render_report(&report);
    if let Some(dir) = &a.out {
        rendered.write_to(dir).map_err(io_err(dir))?;
    }
    say(out, &rendered.table)
}

/// Sleeps so frames are released no faster than the source frame rate.
struct Paced<S> {
    inner: S,
    start: Option<Instant>,
}

impl<S: FrameSource> FrameSource for Paced<S> {
    fn source_id(&self) -> &str {
        self.inner.source_id()
    }

    fn fps(&self) -> f64 {
        self.inner.fps()
    }

    fn next_frame(&mut self) -> Result<Option<FramePacket>, StreamError> {
        let frame = self.inner.next_frame()?;
        if let Some(f) = &frame {
            let start = *self.start.get_or_insert_with(Instant::now);
            let due = start + Duration::from_millis(f.timestamp_ms);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        Ok(frame)
    }
}

fn cmd_serve(rc: &RunConfig, a: &ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let backend = load_backend(&a.backend)?;
    let classes = backend.capabilities().classes.clone();
    let detector = Detector::new(backend, &classes, rc.detect_params())?;
    let source = stream::open_source(&a.source, a.fps)?;
    let mut source: Box<dyn FrameSource> = if a.pace {
        Box::new(Paced { inner: source, start: None })
    } else {
        source
    };

    let broadcaster = stream::broadcast_events(
        &a.bind,
        BroadcastConfig {
            max_pending_bytes: a.max_client_buffer,
        },
    )?;
    eprintln!("listening on {}", broadcaster.local_addr());
    let mut sinks: Vec<Box<dyn EventSink>> = vec![Box::new(broadcaster.sink())];
    if let Some(p) = &a.events_out {
        sinks.push(Box::new(JsonLinesSink::create(p).map_err(io_err(p))?));
    }
    if let Some(dir) = &a.annotated_out {
        let names: Vec<&str> = classes.iter().map(|c| c.name.as_str()).collect();
        sinks.push(Box::new(AnnotatedFrameSink::create(dir, &names).map_err(io_err(dir))?));
    }

    if a.wait_clients > 0 {
        let deadline = Instant::now() + Duration::from_secs_f64(a.wait_timeout.max(0.0));
        while broadcaster.client_count() < a.wait_clients {
            if Instant::now() > deadline {
                return Err(CliError::Pipeline(format!(
                    "timed out waiting for {} client(s) on {}",
                    a.wait_clients,
                    broadcaster.local_addr()
                )));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    let mut config = PipelineConfig {
        queue_capacity: rc.queue_capacity,
        backpressure: rc.policy.into(),
        ..PipelineConfig::default()
    };
    if let Some(w) = a.workers {
        config.workers = w;
    }
    let result = stream::run_pipeline(source.as_mut(), &detector, sinks, config);
    broadcaster.shutdown();
    let stats = match &result {
        Ok(s) => Some(s.clone()),
        Err(e) => e.stats().cloned(),
    };
    if let Some(stats) = stats {
        let json = serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n";
        if let Some(p) = &a.stats_out {
            std::fs::write(p, &json).map_err(io_err(p))?;
        }
        say(out, &json)?;
    }
    result.map(|_| ()).map_err(|e| match e {
        PipelineError::Config(m) => CliError::Usage(m),
        PipelineError::Source { source, .. } => CliError::from(source),
        other => CliError::Pipeline(other.to_string()),
    })
}
