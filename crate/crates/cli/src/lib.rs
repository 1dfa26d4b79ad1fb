//! Command-line driver: `gen-data`, `train`, `predict`, `eval` and `bench`.
//!
//! Exit codes: 0 on success, 2 for configuration problems (including bad
//! arguments), 3 for a missing input file and 1 for anything else. Failures
//! print one JSON object per problem on stderr, prefixed by `error: `.

pub mod artifacts;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use mtr_core::decoder::IntentionPoints;
use mtr_core::evaluation::{benchmark_efficiency, compute_metrics, predict_scenes};
use mtr_core::model::{collect_endpoints, MotionModel};
use mtr_core::numerics::ParameterStore;
use mtr_core::scene::{generate_dataset, read_scenes, write_scenes_with_header, Scene};
use mtr_core::training::train;

use artifacts::{BenchArtifact, Checkpoint, Header, MetricsArtifact, METRIC_NOTES};
use config::{config_hash, desk_preset, validate_config, ConfigIssue, RunConfig};

/// Every problem of a rejected configuration.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "invalid configuration: {}", parts.join("; "))
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug)]
pub struct MissingFile(pub PathBuf);

impl fmt::Display for MissingFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no such file: {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

#[derive(Debug, Parser)]
#[command(name = "mtr", version, about = "Intention-query motion prediction at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario file.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Write NMS-selected world-frame predictions for every focal agent.
    Predict(PredictArgs),
    /// Score a checkpoint or a prediction file against scenario ground truth.
    Eval(EvalArgs),
    /// Time per-focal against shared encoding and sweep attention memory.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// TOML run configuration; the desk preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes; the configured training-set size when omitted.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log; `<out>.log.csv` when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub ckpt: Option<PathBuf>,
    /// Prediction file written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON; a CSV is written next to it. Printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Configuration supplying the eval section when scoring a prediction file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bench report JSON; a CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(desk_preset());
    };
    let mut text = String::new();
    std::io::Read::read_to_string(&mut artifacts::open(path)?, &mut text)
        .with_context(|| format!("reading {}", path.display()))?;
    validate_config(&text).map_err(|errs| ConfigErrors(errs).into())
}

fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    artifacts::require(path)?;
    let scenes = read_scenes(path).with_context(|| format!("reading scenarios from {}", path.display()))?;
    anyhow::ensure!(!scenes.is_empty(), "{} contains no scenes", path.display());
    Ok(scenes)
}

/// Rebuilds the model described by a checkpoint with its trained parameters.
pub fn load_model(ckpt: &Checkpoint) -> Result<(MotionModel, ParameterStore)> {
    let mut fresh = ParameterStore::new(ckpt.parameters.rng_seed);
    let model = MotionModel::new(&mut fresh, &ckpt.config.model, ckpt.intention_points.clone())?;
    let store = ParameterStore::from_record(&ckpt.parameters)?;
    let want: Vec<&str> = fresh.names().collect();
    let have: Vec<&str> = store.names().collect();
    anyhow::ensure!(want == have, "checkpoint parameters do not match its model configuration");
    Ok((model, store))
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let count = args.scenes.unwrap_or(cfg.data.train_scenes);
    let scenes = generate_dataset(&cfg.data.generator, cfg.seed, count)?;
    let header = Header::new("scenarios", &config_hash(&cfg), cfg.seed);
    write_scenes_with_header(&args.out, Some(&serde_json::to_value(&header)?), &scenes)?;
    info!("wrote {count} scenes to {}", args.out.display());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let scenes = load_scenes(&args.data)?;
    let hash = config_hash(&cfg);
    let points = IntentionPoints::generate(&collect_endpoints(&scenes)?, cfg.model.decoder.num_modes, cfg.seed)?;
    let mut store = ParameterStore::new(cfg.seed);
    let model = MotionModel::new(&mut store, &cfg.model, points.clone())?;
    info!("training {} parameters on {} scenes", store.num_scalars(), scenes.len());
    let logs = train(&model, &mut store, &scenes, &cfg.train, cfg.seed, |_| {})?;
    let header = Header::new("checkpoint", &hash, cfg.seed);
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    artifacts::write_training_csv(&log_path, &Header::new("training_log", &hash, cfg.seed), &logs)?;
    let ckpt = Checkpoint {
        header,
        config: cfg,
        intention_points: points,
        parameters: store.to_record(),
    };
    artifacts::write_json(&args.out, &ckpt)?;
    info!("wrote checkpoint {} and log {}", args.out.display(), log_path.display());
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> Result<()> {
    let ckpt: Checkpoint = artifacts::read_json(&args.ckpt)?;
    let scenes = load_scenes(&args.data)?;
    let (model, store) = load_model(&ckpt)?;
    let sets = predict_scenes(&model, &store, &scenes, &ckpt.config.eval)?;
    let header = Header::new("predictions", &ckpt.header.config_hash, ckpt.header.seed);
    artifacts::write_predictions(&args.out, &header, &sets)?;
    info!("wrote {} prediction sets to {}", sets.len(), args.out.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let scenes = load_scenes(&args.data)?;
    let (header, sets, eval) = match (&args.ckpt, &args.predictions) {
        (Some(path), _) => {
            let ckpt: Checkpoint = artifacts::read_json(path)?;
            let (model, store) = load_model(&ckpt)?;
            let sets = predict_scenes(&model, &store, &scenes, &ckpt.config.eval)?;
            (ckpt.header.clone(), sets, ckpt.config.eval.clone())
        }
        (None, Some(path)) => {
            let cfg = load_config(args.config.as_deref())?;
            let (header, sets) = artifacts::read_predictions(path)?;
            let header = header.unwrap_or_else(|| Header::new("predictions", &config_hash(&cfg), cfg.seed));
            (header, sets, cfg.eval)
        }
        (None, None) => anyhow::bail!("eval needs --ckpt or --predictions"),
    };
    let report = compute_metrics(&sets, &scenes, eval.miss_threshold)?;
    let artifact = MetricsArtifact {
        header: Header::new("metrics", &header.config_hash, header.seed),
        notes: METRIC_NOTES.iter().map(|s| s.to_string()).collect(),
        report,
    };
    match &args.out {
        Some(p) => artifacts::write_metrics(p, &artifact)?,
        None => println!("{}", serde_json::to_string_pretty(&artifact)?),
    }
    info!(
        "{} samples: minADE {:.3}, minFDE {:.3}, miss rate {:.3}, mAP {:.3}",
        artifact.report.samples,
        artifact.report.min_ade,
        artifact.report.min_fde,
        artifact.report.miss_rate,
        artifact.report.map
    );
    Ok(())
}

fn bench_cmd(args: &BenchArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = benchmark_efficiency(&cfg.model, &cfg.bench, cfg.seed)?;
    let artifact = BenchArtifact {
        header: Header::new("bench", &config_hash(&cfg), cfg.seed),
        report,
    };
    artifacts::write_bench(&args.out, &artifact)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn error_line(kind: &str, path: Option<&str>, message: &str) -> String {
    let mut obj = serde_json::json!({ "kind": kind, "message": message });
    if let Some(p) = path {
        obj["path"] = serde_json::Value::from(p);
    }
    format!("error: {obj}")
}

/// Exit code and stderr lines for a failed command.
pub fn classify(err: &anyhow::Error) -> (i32, Vec<String>) {
    if let Some(ConfigErrors(list)) = err.downcast_ref::<ConfigErrors>() {
        let lines = list
            .iter()
            .map(|i| error_line("config", Some(&i.path), &i.message))
            .collect();
        return (2, lines);
    }
    if let Some(MissingFile(p)) = err.downcast_ref::<MissingFile>() {
        return (3, vec![error_line("missing_file", Some(&p.display().to_string()), &err.to_string())]);
    }
    if let Some(mtr_core::Error::Config(m)) = err.downcast_ref::<mtr_core::Error>() {
        return (2, vec![error_line("config", None, m)]);
    }
    (1, vec![error_line("runtime", None, &format!("{err:#}"))])
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", error_line("usage", None, &e.kind().to_string()));
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let (code, lines) = classify(&e);
            for l in lines {
                eprintln!("{l}");
            }
            code
        }
    }
}
