//! Command-line pipeline: generate data, train, invert, simulate, summarize.
//!
//! Every artifact-producing command resolves its effective configuration from
//! defaults, an optional JSON config file, and command-line flags (flags
//! win), then writes into a directory named by a hash of that configuration,
//! so reruns with identical settings overwrite their own artifacts
//! deterministically. Seeds are always explicit; nothing is seeded from the
//! clock.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
//! failures (non-convergence, non-finite losses), 4 for filesystem errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    builtin_topology, generate_synthetic, load_csv, write_dataset_csv, DataError, TopologySpec,
};
use crate::evalmetrics::{render_table, EvalReport};
use crate::fcm::{ClassicFcm, FcmActivation};
use crate::inverse::{fuzzy_query, InverseProblem, InverseSolution};
use crate::model::{FcmGraph, FhmParams, ModelConfig};
use crate::training::{cross_validate, CrossValidation, TrainConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("runtime: {0}")]
    Runtime(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Optional JSON config file; every command-line flag overrides its
/// counterpart here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub topology: Option<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub noise_level: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub t_max: Option<usize>,
    pub fusion_weight: Option<f64>,
    pub noise_scale: Option<f64>,
    pub folds: Option<usize>,
    pub steps: Option<usize>,
    pub lambda_soft: Option<f64>,
    pub noise_std: Option<f64>,
    pub inverse_lr: Option<f64>,
    pub inverse_momentum: Option<f64>,
}

#[derive(Debug, Parser)]
#[command(
    name = "fhm",
    version,
    about = "Glass-box neural emulation of fuzzy cognitive maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset for a topology.
    Generate(GenerateArgs),
    /// Cross-validate the model on a dataset and write reports.
    Train(TrainArgs),
    /// Solve for inputs that drive target nodes to requested values.
    Invert(InvertArgs),
    /// Run the classical simulator to a fixed point.
    FcmSim(FcmSimArgs),
    /// Render saved report files as one aligned table.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed; required here or in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Root for artifact directories (default "runs").
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Built-in topology name or path to a topology JSON file.
    #[arg(long)]
    topology: Option<String>,
    /// Number of observations to generate.
    #[arg(long)]
    samples: Option<usize>,
    /// Observation noise standard deviation.
    #[arg(long)]
    noise_level: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Built-in topology name or path to a topology JSON file.
    #[arg(long)]
    topology: Option<String>,
    /// Dataset CSV; omitted means generate synthetically from the topology.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fold-level parallelism (default 1).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Propagation steps per forward pass.
    #[arg(long = "tmax")]
    t_max: Option<usize>,
}

#[derive(Debug, Args)]
struct InvertArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query JSON with `targets` or `fuzzy` plus schedule overrides.
    #[arg(long)]
    query: PathBuf,
    /// Descent steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Base weight of the forbidden-flow penalty.
    #[arg(long)]
    lambda_soft: Option<f64>,
}

#[derive(Debug, Args)]
struct FcmSimArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Built-in topology name or path to a topology JSON file.
    #[arg(long)]
    topology: Option<String>,
    /// Comma-separated start activations; defaults to 0.5 everywhere.
    #[arg(long)]
    start: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Report JSON files to tabulate.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

/// Parses arguments from the process environment and runs one command.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Invert(args) => cmd_invert(&args),
        Command::FcmSim(args) => cmd_fcm_sim(&args),
        Command::Eval(args) => cmd_eval(&args),
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))
}

fn require_seed(common: &CommonArgs, file: &RunConfig) -> Result<u64> {
    common
        .seed
        .or(file.seed)
        .ok_or_else(|| CliError::Config("a --seed is required (none in the config file)".into()))
}

/// Resolves a registry name first, then a filesystem path.
fn resolve_topology(value: Option<&str>, file: &RunConfig) -> Result<TopologySpec> {
    let value = value
        .or(file.topology.as_deref())
        .ok_or_else(|| CliError::Config("a --topology name or file is required".into()))?;
    match builtin_topology(value) {
        Ok(spec) => Ok(spec),
        Err(DataError::UnknownTopology { .. }) if Path::new(value).exists() => {
            let text = fs::read_to_string(value)
                .map_err(|e| CliError::Io(format!("reading {value}: {e}")))?;
            let spec: TopologySpec = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("parsing {value}: {e}")))?;
            spec.to_graph()
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(spec)
        }
        Err(e) => Err(CliError::Config(format!(
            "{e}; or pass a path to a topology JSON file"
        ))),
    }
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::Io(_) | DataError::Csv(_) => CliError::Io(e.to_string()),
        DataError::NonConvergent { .. } => CliError::Runtime(format!("data: {e}")),
        other => CliError::Config(other.to_string()),
    }
}

fn config_hash(payload: &impl Serialize) -> String {
    let json = serde_json::to_string(payload).expect("effective config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

/// `<out-root>/<command>-<label>-<hash>`, created on demand.
fn artifact_dir(
    common: &CommonArgs,
    file: &RunConfig,
    command: &str,
    label: &str,
    payload: &impl Serialize,
) -> Result<PathBuf> {
    let root = common
        .out
        .clone()
        .or_else(|| file.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let dir = root.join(format!("{command}-{label}-{}", config_hash(payload)));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("encoding {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn json_value(value: &impl Serialize) -> serde_json::Value {
    serde_json::to_value(value).expect("effective config serializes")
}

#[derive(Debug, Serialize)]
struct GenerateEffective {
    command: &'static str,
    topology: TopologySpec,
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let file = read_config(args.common.config.as_deref())?;
    let seed = require_seed(&args.common, &file)?;
    let mut spec = resolve_topology(args.topology.as_deref(), &file)?;
    spec.generator.seed = seed;
    if let Some(samples) = args.samples.or(file.samples) {
        spec.generator.samples = samples;
    }
    if let Some(noise) = args.noise_level.or(file.noise_level) {
        spec.generator.noise_level = noise;
    }
    let graph = spec.to_graph().map_err(data_error)?;
    let dataset = generate_synthetic(&spec).map_err(data_error)?;

    let effective = GenerateEffective {
        command: "generate",
        topology: spec.clone(),
    };
    let dir = artifact_dir(&args.common, &file, "generate", &spec.name, &effective)?;
    write_json(&dir.join("topology.json"), &spec)?;
    write_dataset_csv(&dataset, &graph, &dir.join("dataset.csv")).map_err(data_error)?;

    println!(
        "generated {}: {} nodes, {} edges (density {:.2}), {} rows -> {}",
        spec.name,
        graph.node_count(),
        graph.edge_count(),
        graph.edge_count() as f64 / graph.node_count() as f64,
        dataset.rows(),
        dir.display()
    );
    Ok(())
}

/// Everything that determines a training run's artifacts.
#[derive(Debug, Serialize)]
struct TrainEffective {
    command: &'static str,
    topology: TopologySpec,
    data: Option<String>,
    train: TrainConfig,
    model: ModelConfig,
    threads: usize,
}

/// A trained fold: enough to rebuild the model and drive the inverse solver.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fold: usize,
    pub best: bool,
    pub validation_loss: f64,
    pub best_s_perf: Option<f64>,
    pub graph: FcmGraph,
    pub params: FhmParams,
}

fn train_config_from(file: &RunConfig, args: &TrainArgs, seed: u64) -> TrainConfig {
    let defaults = TrainConfig::default();
    TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        lr: file.lr.unwrap_or(defaults.lr),
        momentum: file.momentum.unwrap_or(defaults.momentum),
        t_max: args.t_max.or(file.t_max).unwrap_or(defaults.t_max),
        fusion_weight: file.fusion_weight.unwrap_or(defaults.fusion_weight),
        noise_scale: file.noise_scale.unwrap_or(defaults.noise_scale),
        folds: args.folds.or(file.folds).unwrap_or(defaults.folds),
        seed,
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = read_config(args.common.config.as_deref())?;
    let seed = require_seed(&args.common, &file)?;
    let mut spec = resolve_topology(args.topology.as_deref(), &file)?;
    spec.generator.seed = seed;
    if let Some(samples) = file.samples {
        spec.generator.samples = samples;
    }
    if let Some(noise) = file.noise_level {
        spec.generator.noise_level = noise;
    }
    let graph = spec.to_graph().map_err(data_error)?;
    let train_config = train_config_from(&file, args, seed);
    train_config
        .validate()
        .map_err(|e| CliError::Config(format!("training config: {e}")))?;
    let model_config = ModelConfig::default();
    let threads = args.threads.or(file.threads).unwrap_or(1);
    let data_path = args.data.clone().or_else(|| file.data.clone());

    let effective = TrainEffective {
        command: "train",
        topology: spec.clone(),
        data: data_path.as_ref().map(|p| p.display().to_string()),
        train: train_config.clone(),
        model: model_config,
        threads,
    };
    let dir = artifact_dir(&args.common, &file, "train", &spec.name, &effective)?;

    let dataset = match &data_path {
        Some(path) => {
            let load = load_csv(path, &graph).map_err(data_error)?;
            if load.rows_dropped > 0 {
                println!(
                    "loaded {}: {} rows kept, {} dropped",
                    path.display(),
                    load.dataset.rows(),
                    load.rows_dropped
                );
            }
            load.dataset
        }
        None => {
            let dataset = generate_synthetic(&spec).map_err(data_error)?;
            write_dataset_csv(&dataset, &graph, &dir.join("dataset.csv")).map_err(data_error)?;
            dataset
        }
    };

    let started = Instant::now();
    let cv = cross_validate(&dataset, &graph, &train_config, &model_config, threads)
        .map_err(|e| CliError::Runtime(format!("training: {e}")))?;
    let runtime_seconds = started.elapsed().as_secs_f64();

    write_json(&dir.join("topology.json"), &spec)?;
    write_checkpoints(&dir, &graph, &cv)?;

    let accuracies = cv.folds.iter().map(|f| f.accuracy.clone()).collect();
    let report = EvalReport::new(
        spec.name.clone(),
        graph.node_count(),
        accuracies,
        json_value(&effective),
    )
    .map_err(|e| CliError::Runtime(format!("evaluation: {e}")))?;
    write_json(&dir.join("report.json"), &report)?;
    let table = render_table(&[&report]);
    fs::write(dir.join("report.txt"), &table)
        .map_err(|e| CliError::Io(format!("writing report.txt: {e}")))?;
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "runtime_seconds": runtime_seconds }),
    )?;

    print!("{table}");
    println!("artifacts -> {}", dir.display());
    Ok(())
}

fn write_checkpoints(dir: &Path, graph: &FcmGraph, cv: &CrossValidation) -> Result<()> {
    for outcome in &cv.folds {
        let fold = outcome.metrics.fold;
        let checkpoint = Checkpoint {
            fold,
            best: fold == cv.aggregate.best_fold,
            validation_loss: outcome.metrics.validation_loss,
            best_s_perf: outcome.metrics.best_s_perf,
            graph: graph.clone(),
            params: outcome.params.clone(),
        };
        write_json(&dir.join(format!("checkpoint_fold_{fold}.json")), &checkpoint)?;
        if checkpoint.best {
            write_json(&dir.join("checkpoint_best.json"), &checkpoint)?;
        }
    }
    Ok(())
}

/// Targets come either as numeric values or as fuzzy terms resolved through
/// a membership table; schedule fields override the solver defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryFile {
    pub targets: Option<BTreeMap<String, f64>>,
    pub fuzzy: Option<BTreeMap<String, String>>,
    /// Term-to-value table for fuzzy queries; defaults to
    /// low 0.1 / medium 0.5 / high 0.9.
    pub memberships: Option<BTreeMap<String, f64>>,
    pub steps: Option<usize>,
    pub lambda_soft: Option<f64>,
    pub noise_std: Option<f64>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
}

fn default_memberships() -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("low".to_string(), 0.1),
        ("medium".to_string(), 0.5),
        ("high".to_string(), 0.9),
    ])
}

#[derive(Debug, Serialize)]
struct InvertEffective {
    command: &'static str,
    checkpoint: String,
    query: QueryFile,
    steps: usize,
    lambda_soft: f64,
    seed: u64,
}

/// Solution JSON: named targets, the solved inputs, predictions, and the
/// full loss trace.
#[derive(Debug, Serialize, Deserialize)]
pub struct SolutionFile {
    pub targets: BTreeMap<String, f64>,
    pub node_names: Vec<String>,
    #[serde(flatten)]
    pub solution: InverseSolution,
}

fn cmd_invert(args: &InvertArgs) -> Result<()> {
    let file = read_config(args.common.config.as_deref())?;
    let seed = require_seed(&args.common, &file)?;

    let text = fs::read_to_string(&args.checkpoint)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", args.checkpoint.display())))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", args.checkpoint.display())))?;
    checkpoint
        .params
        .validate(&checkpoint.graph)
        .map_err(|e| CliError::Config(format!("checkpoint: {e}")))?;
    let graph = &checkpoint.graph;

    let text = fs::read_to_string(&args.query)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", args.query.display())))?;
    let query: QueryFile = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("parsing {}: {e}", args.query.display())))?;

    let named: BTreeMap<String, f64> = match (&query.targets, &query.fuzzy) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "query has both targets and fuzzy; pick one".into(),
            ))
        }
        (None, None) => {
            return Err(CliError::Config(
                "query needs either targets or fuzzy".into(),
            ))
        }
        (Some(targets), None) => targets.clone(),
        (None, Some(labels)) => {
            let memberships = query.memberships.clone().unwrap_or_else(default_memberships);
            let indexed = fuzzy_query(labels, &memberships, graph.node_names())
                .map_err(|e| CliError::Config(format!("query: {e}")))?;
            indexed
                .into_iter()
                .map(|(i, v)| (graph.node_names()[i].clone(), v))
                .collect()
        }
    };
    let mut targets = BTreeMap::new();
    for (name, value) in &named {
        let index = graph.node_index(name).ok_or_else(|| {
            CliError::Config(format!(
                "query targets unknown node {name:?}; nodes: {}",
                graph.node_names().join(", ")
            ))
        })?;
        targets.insert(index, *value);
    }

    // The model aggregates along columns (entry [i][j] is the influence of
    // node i on node j); the solver reads rows as inflows, so both the
    // learned weights and the topology enter transposed.
    let w = checkpoint.params.w_fcm.transpose();
    let adjacency = graph.adjacency().transpose();
    let mut problem = InverseProblem::from_adjacency(w, &adjacency, targets)
        .map_err(|e| CliError::Config(format!("inverse: {e}")))?;
    if let Some(steps) = args.steps.or(query.steps).or(file.steps) {
        problem.steps = steps;
    }
    if let Some(lambda) = args.lambda_soft.or(query.lambda_soft).or(file.lambda_soft) {
        problem.lambda_soft = lambda;
    }
    if let Some(noise_std) = query.noise_std.or(file.noise_std) {
        problem.noise_std = noise_std;
    }
    if let Some(lr) = query.lr.or(file.inverse_lr) {
        problem.lr = lr;
    }
    if let Some(momentum) = query.momentum.or(file.inverse_momentum) {
        problem.momentum = momentum;
    }

    let effective = InvertEffective {
        command: "invert",
        checkpoint: args.checkpoint.display().to_string(),
        query: query.clone(),
        steps: problem.steps,
        lambda_soft: problem.lambda_soft,
        seed,
    };
    let dir = artifact_dir(&args.common, &file, "invert", "query", &effective)?;

    let solution = problem
        .solve_seeded(seed)
        .map_err(|e| CliError::Runtime(format!("inverse: {e}")))?;

    let last = solution
        .loss_trace
        .last()
        .expect("schedule guarantees at least two steps");
    println!(
        "solved {} targets in {} steps: target loss {:.6}, forbidden flow {:.6}",
        named.len(),
        solution.loss_trace.len(),
        last.target,
        solution.forbidden_norm
    );
    let out = SolutionFile {
        targets: named,
        node_names: graph.node_names().to_vec(),
        solution,
    };
    write_json(&dir.join("solution.json"), &out)?;
    println!("artifacts -> {}", dir.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct FcmSimEffective {
    command: &'static str,
    topology: TopologySpec,
    start: Vec<f64>,
    seed: u64,
}

fn cmd_fcm_sim(args: &FcmSimArgs) -> Result<()> {
    let file = read_config(args.common.config.as_deref())?;
    let seed = require_seed(&args.common, &file)?;
    let spec = resolve_topology(args.topology.as_deref(), &file)?;
    let graph = spec.to_graph().map_err(data_error)?;
    let n = graph.node_count();

    let start: Vec<f64> = match &args.start {
        Some(text) => {
            let parsed: std::result::Result<Vec<f64>, _> =
                text.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let start = parsed
                .map_err(|e| CliError::Config(format!("start vector: {e}")))?;
            if start.len() != n {
                return Err(CliError::Config(format!(
                    "start vector has {} entries for {n} nodes",
                    start.len()
                )));
            }
            start
        }
        None => vec![0.5; n],
    };

    let effective = FcmSimEffective {
        command: "fcm-sim",
        topology: spec.clone(),
        start: start.clone(),
        seed,
    };
    let dir = artifact_dir(&args.common, &file, "fcm-sim", &spec.name, &effective)?;

    let fcm = ClassicFcm::new(graph.adjacency().clone(), FcmActivation::Sigmoid)
        .map_err(|e| CliError::Config(format!("simulator: {e}")))?;
    let run = fcm
        .run_to_fixed_point(&start)
        .map_err(|e| CliError::Runtime(format!("simulator: {e}")))?;

    let path = dir.join("trajectory.csv");
    let mut writer = csv::Writer::from_path(&path)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    writer
        .write_record(graph.node_names())
        .and_then(|()| {
            for state in &run.trajectory {
                let row: Vec<String> = state.iter().map(|v| v.to_string()).collect();
                writer.write_record(&row)?;
            }
            writer.flush().map_err(csv::Error::from)
        })
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;

    println!(
        "{}: {} in {} iterations -> {}",
        spec.name,
        if run.converged { "converged" } else { "did not converge" },
        run.iterations,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("parsing {}: {e}", path.display())))?;
        reports.push(report);
    }
    let refs: Vec<&EvalReport> = reports.iter().collect();
    print!("{}", render_table(&refs));
    Ok(())
}
