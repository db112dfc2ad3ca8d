//! Command-line front end.
//!
//! Every failure ends the process with one JSON line on stderr,
//! `{"error": <kind>, "message": <text>}`, and an exit code per kind.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vstream_core::estimator::{train, TrainingSet};
use vstream_core::oracle::{
    generate_example, DatasetSpec, MaskStrategy, OracleMode, PartitionSpec, SpecOracle,
};
use vstream_core::stats::Summary;
use vstream_core::trace::AttentionTrace;
use vstream_core::trajectory::{auc_vs_progress, tortuosity_metric, Outcome, TrajectoryStats, CANONICAL_REGIONS};
use vstream_core::unitization::PartitionMethod;

use crate::collect::{collect_with, default_threads};
use crate::config::{ConfigError, RunConfig};
use crate::evaluation::{evaluate_methods, held_out_examples, Method};
use crate::formats::{self, EvalRow, FormatError, Manifest};
use crate::stream::{stream_attribute, AttributionFrame, LinearScorer, PipelineError, StreamConfig, TraceSource};
use crate::trace_io::{load_trace_file, save_trace_file, TraceFileError};

#[derive(Debug, Parser)]
#[command(name = "vstream", version, about = "Amortized visual attribution over cached attention")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key = value file; explicit flags win over it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition a trace's vision tokens into regions.
    Unitize(UnitizeArgs),
    /// Generate oracle targets for training.
    Collect(CollectArgs),
    /// Fit estimator weights.
    Train(TrainArgs),
    /// Stream per-span attributions as NDJSON.
    Stream(StreamArgs),
    /// Score the estimator and baselines against oracle ground truth.
    Eval(EvalArgs),
    /// Trajectory dynamics over frame logs.
    Trajectory(TrajectoryArgs),
}

#[derive(Debug, Args)]
pub struct UnitizeArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value = "agglomerative")]
    pub method: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    /// Dataset spec as JSON; the flags below are ignored when given.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub examples: usize,
    #[arg(long, default_value_t = 24)]
    pub steps: usize,
    #[arg(long, default_value_t = 3)]
    pub spans: usize,
    #[arg(long)]
    pub masks_per_sample: Option<usize>,
    #[arg(long, default_value = "agglomerative")]
    pub method: String,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Use the planted-linear oracle instead of the softmax model.
    #[arg(long)]
    pub planted: bool,
    /// Planted target noise as a fraction of the target spread.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub plant_seed: u64,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Skip writing per-example traces and partitions.
    #[arg(long)]
    pub no_traces: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub masks_per_sample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Let the producer run ahead of the consumer.
    #[arg(long)]
    pub free: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub weights: PathBuf,
    /// Evaluate on this many fresh examples instead of the collected ones.
    #[arg(long, default_value_t = 0)]
    pub held_out: usize,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Directory of `<id>.ndjson` frame logs.
    #[arg(long, value_name = "DIR")]
    pub frames: PathBuf,
    /// CSV with `id,outcome` rows.
    #[arg(long, value_name = "FILE")]
    pub labels: PathBuf,
    #[arg(long, default_value_t = CANONICAL_REGIONS)]
    pub regions: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("format: {0}")]
    Format(String),
    #[error("dimension: {0}")]
    Dimension(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Format(_) => 4,
            CliError::Dimension(_) => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Other(_) => "error",
            CliError::Usage(_) => "usage",
            CliError::MissingFile(_) => "missing_file",
            CliError::Format(_) => "format",
            CliError::Dimension(_) => "dimension",
        }
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        let message = match self {
            CliError::MissingFile(p) => p.display().to_string(),
            CliError::Usage(m) | CliError::Format(m) | CliError::Dimension(m) | CliError::Other(m) => m.clone(),
        };
        serde_json::json!({ "error": self.kind(), "message": message }).to_string()
    }
}

impl From<vstream_core::Error> for CliError {
    fn from(e: vstream_core::Error) -> Self {
        match e {
            vstream_core::Error::DimensionMismatch { .. } => CliError::Dimension(e.to_string()),
            vstream_core::Error::Validation { .. } | vstream_core::Error::NonFinite { .. } => {
                CliError::Format(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Core(c) => c.into(),
            FormatError::Io(io) => CliError::Other(io.to_string()),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<TraceFileError> for CliError {
    fn from(e: TraceFileError) -> Self {
        match e {
            TraceFileError::Io(io) => CliError::Other(io.to_string()),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dimension { .. } => CliError::Dimension(e.to_string()),
            PipelineError::Consumer(c) => c.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Format(format!("config {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Format(e.to_string())
    }
}

/// Parses `args` (program name first), runs the subcommand and writes
/// streamed output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(stdout, "{e}")?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return Err(CliError::Usage(first));
        }
    };
    execute(cli, stdout)
}

/// Process entry: logging, dispatch, error line and exit code.
pub fn main_entry() -> i32 {
    let verbose = std::env::args().filter(|a| a.starts_with("-v") && a.chars().skip(1).all(|c| c == 'v')).count();
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match run(std::env::args_os(), &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn input(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Context {
    fn out_dir(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::parse(&fs::read_to_string(input(p)?)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    let ctx = Context {
        cfg,
        out: cli.out.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    match cli.command {
        Command::Unitize(a) => cmd_unitize(ctx, a),
        Command::Collect(a) => cmd_collect(ctx, a),
        Command::Train(a) => cmd_train(ctx, a),
        Command::Stream(a) => cmd_stream(ctx, a, cli.out.is_some(), stdout),
        Command::Eval(a) => cmd_eval(ctx, a),
        Command::Trajectory(a) => cmd_trajectory(ctx, a),
    }
}

fn parse_method(s: &str) -> Result<PartitionMethod, CliError> {
    s.parse().map_err(|e: vstream_core::Error| CliError::Usage(e.to_string()))
}

fn feature_rows(trace: &AttentionTrace) -> Vec<Vec<f64>> {
    trace
        .feature_grid
        .chunks(trace.feature_dim.max(1))
        .map(|r| r.iter().map(|&x| f64::from(x)).collect())
        .collect()
}

fn cmd_unitize(mut ctx: Context, a: UnitizeArgs) -> Result<(), CliError> {
    let trace = load_trace_file(input(&a.trace)?)?;
    ctx.cfg.tau = a.tau.unwrap_or(ctx.cfg.tau);
    ctx.cfg.k = a.k.unwrap_or(ctx.cfg.k);
    let spec = PartitionSpec {
        method: parse_method(&a.method)?,
        tau: ctx.cfg.tau,
        k: ctx.cfg.k,
    };
    let partition = spec.build(&feature_rows(&trace), trace.grid_dims, ctx.cfg.seed)?;
    log::info!("{} regions from {} tokens", partition.num_regions(), partition.num_tokens());
    formats::write_partition(&partition, ctx.out_dir()?.join("partition.json"))?;
    Ok(())
}

fn cmd_collect(ctx: Context, a: CollectArgs) -> Result<(), CliError> {
    let spec = match &a.spec {
        Some(p) => formats::read_json::<DatasetSpec>(input(p)?)?,
        None => {
            let mut spec = DatasetSpec {
                num_examples: a.examples,
                num_steps: a.steps,
                spans_per_example: a.spans,
                masks_per_sample: a.masks_per_sample.unwrap_or(ctx.cfg.train.masks_per_sample),
                masks: MaskStrategy::Random,
                seed: ctx.cfg.seed,
                ..DatasetSpec::default()
            };
            spec.partition = PartitionSpec {
                method: parse_method(&a.method)?,
                tau: a.tau.unwrap_or(ctx.cfg.tau),
                k: a.k.unwrap_or(ctx.cfg.k),
            };
            if a.planted {
                spec.mode = OracleMode::Planted {
                    noise_fraction: a.noise,
                    plant_seed: a.plant_seed,
                };
            }
            spec
        }
    };
    let oracle = SpecOracle::build(&spec)?;
    let data = collect_with(&oracle, &spec, a.threads.unwrap_or_else(default_threads))?;
    let out = ctx.out_dir()?;
    formats::write_training_set(&data.training, out.join("train.jsonl"))?;
    if !a.no_traces {
        fs::create_dir_all(out.join("traces"))?;
        fs::create_dir_all(out.join("partitions"))?;
        for (e, ex) in data.examples.iter().enumerate() {
            save_trace_file(&ex.trace, out.join("traces").join(format!("ex_{e:05}.vstr")))?;
            formats::write_partition(&ex.partition, out.join("partitions").join(format!("ex_{e:05}.json")))?;
        }
    }
    let manifest = Manifest {
        examples: data.examples.len(),
        spans: data.training.samples.len(),
        passes: data.forward_passes,
        seed: spec.seed,
        mode: match spec.mode {
            OracleMode::Nonlinear => "nonlinear".into(),
            OracleMode::Planted { .. } => "planted".into(),
        },
        spec,
    };
    log::info!("{} examples, {} forward passes", manifest.examples, manifest.passes);
    formats::write_json(&manifest, out.join("manifest.json"))?;
    Ok(())
}

fn cmd_train(mut ctx: Context, a: TrainArgs) -> Result<(), CliError> {
    let set: TrainingSet = formats::read_training_set(input(&a.data)?)?;
    let t = &mut ctx.cfg.train;
    t.learning_rate = a.lr.unwrap_or(t.learning_rate);
    t.iterations = a.iters.unwrap_or(t.iterations);
    t.batch_size = a.batch.unwrap_or(t.batch_size);
    t.masks_per_sample = a.masks_per_sample.unwrap_or(t.masks_per_sample);
    let outcome = train(&set, &ctx.cfg.train)?;
    let rates: Vec<f64> = (0..outcome.loss_history.len())
        .map(|i| ctx.cfg.train.learning_rate_at(i))
        .collect();
    let out = ctx.out_dir()?;
    formats::write_weights(&outcome.weights, out.join("weights.json"))?;
    formats::write_loss_csv(&outcome.loss_history, &rates, out.join("loss.csv"))?;
    if outcome.skipped_batches > 0 {
        log::warn!("{} batches skipped for degenerate variance", outcome.skipped_batches);
    }
    Ok(())
}

fn cmd_stream(ctx: Context, a: StreamArgs, to_dir: bool, stdout: &mut dyn Write) -> Result<(), CliError> {
    let trace = load_trace_file(input(&a.trace)?)?;
    let partition = formats::read_partition(input(&a.partition)?)?;
    let weights = formats::read_weights(input(&a.weights)?)?;
    let saliency: Vec<f64> = trace.saliency.iter().map(|&x| f64::from(x)).collect();
    let mut config = StreamConfig::default();
    if a.free {
        config.pacing = crate::stream::Pacing::Free;
    }

    let mut file_sink;
    let sink: &mut dyn Write = if to_dir {
        let stem = a.trace.file_stem().map_or("frames".into(), |s| s.to_string_lossy().into_owned());
        file_sink = BufWriter::new(File::create(ctx.out_dir()?.join(format!("{stem}.ndjson")))?);
        &mut file_sink
    } else {
        stdout
    };
    let mut write_err: Option<io::Error> = None;
    let summary = stream_attribute(
        TraceSource::new(&trace),
        &partition,
        LinearScorer(weights),
        &saliency,
        &config,
        |frame: AttributionFrame| {
            if write_err.is_none() {
                let line = serde_json::to_string(&frame).expect("frames serialize");
                if let Err(e) = writeln!(sink, "{line}") {
                    write_err = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    sink.flush()?;
    log::info!("{} frames over {} tokens", summary.frames, summary.tokens);
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    dataset: &'a str,
    examples: usize,
    reports: Vec<vstream_core::metrics::EvalReport>,
}

fn cmd_eval(ctx: Context, a: EvalArgs) -> Result<(), CliError> {
    let manifest: Manifest = formats::read_json(input(&a.manifest)?)?;
    let weights = formats::read_weights(input(&a.weights)?)?;
    let spec = manifest.spec;
    let oracle = SpecOracle::build(&spec)?;
    let (dataset, examples) = if a.held_out > 0 {
        ("held_out", held_out_examples(&oracle, &spec, a.held_out)?)
    } else {
        let ex = (0..spec.num_examples)
            .map(|i| generate_example(&oracle, &spec, i))
            .collect::<Result<Vec<_>, _>>()?;
        ("train", ex)
    };
    let top_k = a.top_k.unwrap_or(ctx.cfg.top_k);
    let methods = [
        Method::Estimator(&weights),
        Method::Attention,
        Method::Random { seed: ctx.cfg.seed },
    ];
    let reports = evaluate_methods(&oracle, &examples, &methods, top_k)?;
    let rows: Vec<EvalRow> = reports.iter().map(|r| EvalRow::new(dataset, r)).collect();
    let out = ctx.out_dir()?;
    formats::write_json(
        &EvalOutput {
            dataset,
            examples: examples.len(),
            reports,
        },
        out.join("report.json"),
    )?;
    formats::write_eval_csv(&rows, out.join("summary.csv"))?;
    for r in &rows {
        log::info!("{}: lds {:?} top-{} drop {:?}", r.method, r.lds_mean, r.top_k, r.top_k_drop_mean);
    }
    Ok(())
}

fn read_frames(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut effects = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: AttributionFrame = serde_json::from_str(&line)
            .map_err(|e| CliError::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
        if let Some(first) = effects.first().map(Vec::len) {
            if first != frame.region_scores.len() {
                return Err(CliError::Dimension(format!(
                    "{} line {}: {} region scores, expected {first}",
                    path.display(),
                    n + 1,
                    frame.region_scores.len()
                )));
            }
        }
        effects.push(frame.region_scores);
    }
    Ok(effects)
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, Outcome>, CliError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut labels = BTreeMap::new();
    for row in reader.deserialize::<(String, String)>() {
        let (id, outcome) = row?;
        let outcome: Outcome = outcome.trim().parse()?;
        labels.insert(id.trim().to_string(), outcome);
    }
    Ok(labels)
}

#[derive(Serialize)]
struct GroupSummary {
    count: usize,
    closed_paths: usize,
    path_length: Option<Summary>,
    tortuosity: Option<Summary>,
    concentration: Option<Summary>,
}

#[derive(Serialize)]
struct ProgressAuc {
    fraction: f64,
    auc: Option<f64>,
}

#[derive(Serialize)]
struct TrajectorySummary {
    trajectories: Vec<TrajectoryStats>,
    skipped: Vec<String>,
    groups: BTreeMap<String, GroupSummary>,
    tortuosity_auc: Vec<ProgressAuc>,
}

fn cmd_trajectory(ctx: Context, a: TrajectoryArgs) -> Result<(), CliError> {
    let labels = read_labels(input(&a.labels)?)?;
    let mut logs: Vec<PathBuf> = fs::read_dir(input(&a.frames)?)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
        .collect();
    logs.sort();
    let out = ctx.out_dir()?.to_path_buf();
    fs::create_dir_all(out.join("trajectories"))?;

    let mut all = Vec::new();
    let mut stats = Vec::new();
    let mut skipped = Vec::new();
    for path in &logs {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let outcome = labels.get(&id).copied().unwrap_or(Outcome::Unknown);
        let effects = read_frames(path)?;
        let (s, proj) = match TrajectoryStats::compute(id.clone(), outcome, &effects, a.regions) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(id);
                continue;
            }
        };
        let canon = vstream_core::trajectory::canonicalize(&effects, a.regions)?;
        let mut w = csv::Writer::from_path(out.join("trajectories").join(format!("{id}.csv")))?;
        let mut header = vec!["step".to_string()];
        header.extend((1..=a.regions).map(|r| format!("e_{r}")));
        header.extend(["x", "y", "z"].map(String::from));
        w.write_record(&header)?;
        for (step, (e, p)) in canon.steps.iter().zip(&proj.points).enumerate() {
            let mut rec = vec![step.to_string()];
            rec.extend(e.iter().chain(p).map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        all.push((effects, outcome));
        stats.push(s);
    }

    let mut groups = BTreeMap::new();
    for outcome in [Outcome::Success, Outcome::ReasoningFailure, Outcome::Hallucination, Outcome::Unknown] {
        let members: Vec<&TrajectoryStats> = stats.iter().filter(|s| s.outcome == outcome).collect();
        if members.is_empty() {
            continue;
        }
        let path: Vec<f64> = members.iter().map(|s| s.path_length).collect();
        let tort: Vec<f64> = members.iter().filter_map(|s| s.tortuosity.value()).collect();
        let conc: Vec<f64> = members.iter().filter_map(|s| s.mean_concentration).collect();
        groups.insert(
            outcome.as_str().to_string(),
            GroupSummary {
                count: members.len(),
                closed_paths: members.len() - tort.len(),
                path_length: Summary::of(&path),
                tortuosity: Summary::of(&tort),
                concentration: Summary::of(&conc),
            },
        );
    }
    let fractions: Vec<f64> = (1..=10).map(|i| f64::from(i) / 10.0).collect();
    let aucs = auc_vs_progress(&all, &fractions, tortuosity_metric);
    let summary = TrajectorySummary {
        trajectories: stats,
        skipped,
        groups,
        tortuosity_auc: fractions
            .into_iter()
            .zip(aucs)
            .map(|(fraction, auc)| ProgressAuc { fraction, auc })
            .collect(),
    };
    formats::write_json(&summary, out.join("summary.json"))?;
    Ok(())
}
