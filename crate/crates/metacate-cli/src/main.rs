//! Batch pipeline driver: generate synthetic task suites, fit pseudo-CATE
//! labels, meta-train the few-shot effect estimator, and score checkpoints
//! against task-local baselines.
//!
//! Every subcommand is deterministic in its seed: reruns with identical
//! inputs write byte-identical primary outputs. The training log is not a
//! primary output (it records wall-clock times). Exit codes follow the
//! scripting contract: 0 success, 1 runtime failure, 2 usage error —
//! where "usage" covers bad flags, malformed config files, and missing
//! input paths, and "runtime" covers everything discovered after the
//! inputs load.

use clap::{Args, Parser, Subcommand};
use metacate_core::data::{generate_synth_suite, load_suite, split_indices, write_json, TaskData};
use metacate_core::episodic::{
    evaluate, meta_train, CatePredictor, Checkpoint, EvalConfig, EvalOutcome, LogRecord,
    MetaPredictor, Objective, TrainConfig,
};
use metacate_core::eval::{Baseline, BaselineKind};
use metacate_core::metalearner::LearnerKind;
use metacate_core::nn::HeadMode;
use metacate_core::pseudocate::{attach_labels, check_labelable, label_suite, LabelConfig};
use metacate_core::seeds::derive_seed;
use serde::Deserialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "metacate",
    version,
    about = "Few-shot CATE estimation: generate, label, meta-train, evaluate"
)]
struct Cli {
    /// Worker thread cap (default: METACATE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark suite (task CSVs + sidecars + manifest).
    Gen(GenArgs),
    /// Fit pseudo-CATE labels for every task in a suite (cached, idempotent).
    Label(LabelArgs),
    /// Meta-train shared encoders on the suite's training split.
    Train(TrainArgs),
    /// Score a checkpoint (and optional baselines) on the held-out test split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Number of tasks in the suite.
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    /// Instances per task.
    #[arg(long = "per-task", default_value_t = 10000)]
    per_task: usize,
    /// Output directory for the suite.
    #[arg(long)]
    out: PathBuf,
    /// Root seed; fixes every task draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct LabelArgs {
    /// Suite directory (as written by `gen`).
    #[arg(long)]
    data: PathBuf,
    /// Root labeling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON labeling config (fields override the defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Refit even when a valid cached label file exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Suite directory with labels attached.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, log, and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config (flags below override file values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimator: dr, ra, or plugin.
    #[arg(long)]
    learner: Option<String>,
    /// Adaptation head: linear or gp.
    #[arg(long)]
    head: Option<String>,
    /// Training objective: cate or subproblem (ablation).
    #[arg(long)]
    objective: Option<String>,
    /// Epoch cap.
    #[arg(long)]
    epochs: Option<usize>,
    /// Support instances per episode: a pair "3,3" or a total like "6".
    #[arg(long)]
    ns: Option<String>,
    /// Query instances per episode: a pair "20,20" or a total like "40".
    #[arg(long)]
    nq: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Suite directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for summary.csv and raw.csv.
    #[arg(long)]
    out: PathBuf,
    /// Support instances per episode: a pair "3,3" or a total like "6".
    #[arg(long)]
    ns: Option<String>,
    /// Support redraws per test task.
    #[arg(long, default_value_t = 30)]
    repeats: usize,
    /// Comma list of baselines to score alongside: mean, tl, sl (or all).
    #[arg(long)]
    baselines: Option<String>,
    /// Evaluation seed; fixes the support draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// CLI failure carrying its exit class.
enum Failure {
    Usage(String),
    Runtime(String),
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl From<metacate_core::Error> for Failure {
    fn from(e: metacate_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    let (stage, result) = match cli.cmd {
        Cmd::Gen(args) => ("gen", cmd_gen(args)),
        Cmd::Label(args) => ("label", cmd_label(args)),
        Cmd::Train(args) => ("train", cmd_train(args)),
        Cmd::Eval(args) => ("eval", cmd_eval(args)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[{stage}]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error[{stage}]: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Cap rayon's worker count from --threads or METACATE_THREADS.
fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("METACATE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        // Ignore "already initialized" in test harnesses.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn require_dir(path: &Path, flag: &str) -> CliResult<()> {
    if !path.is_dir() {
        return Err(usage(format!(
            "--{flag} {}: not a directory",
            path.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path, flag: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(usage(format!("--{flag} {}: no such file", path.display())));
    }
    Ok(())
}

/// Parse a per-arm count pair: "3,3" explicitly, or a total like "6"
/// split as evenly as possible (the control arm gets any remainder).
fn parse_pair(s: &str, flag: &str) -> CliResult<(usize, usize)> {
    let one = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("--{flag} expects a count or a pair like 3,3; got {s:?}")))
    };
    match s.split_once(',') {
        Some((a, b)) => Ok((one(a)?, one(b)?)),
        None => {
            let total = one(s)?;
            Ok((total - total / 2, total / 2))
        }
    }
}

fn parse_learner(s: &str) -> CliResult<LearnerKind> {
    s.parse().map_err(|_| {
        usage(format!(
            "unknown learner {s:?} (expected dr, ra, or plugin)"
        ))
    })
}

fn parse_head(s: &str) -> CliResult<HeadMode> {
    match s {
        "linear" => Ok(HeadMode::Linear),
        "gp" => Ok(HeadMode::Gp),
        other => Err(usage(format!(
            "unknown head {other:?} (expected linear or gp)"
        ))),
    }
}

fn parse_objective(s: &str) -> CliResult<Objective> {
    match s {
        "cate" | "cate_loss" => Ok(Objective::CateLoss),
        "subproblem" | "subproblem_loss" => Ok(Objective::SubproblemLoss),
        other => Err(usage(format!(
            "unknown objective {other:?} (expected cate or subproblem)"
        ))),
    }
}

fn parse_baselines(s: &str) -> CliResult<Vec<BaselineKind>> {
    if s.trim() == "none" {
        return Ok(Vec::new());
    }
    let mut kinds: Vec<BaselineKind> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parsed: Vec<BaselineKind> = match part {
            "all" => BaselineKind::ALL.to_vec(),
            "mean" | "mean_diff" => vec![BaselineKind::MeanDiff],
            "tl" | "t_learner" | "t_learner_ridge" => vec![BaselineKind::TLearnerRidge],
            "sl" | "s_learner" | "s_learner_ridge" => vec![BaselineKind::SLearnerRidge],
            other => {
                return Err(usage(format!(
                    "unknown baseline {other:?} (expected mean, tl, sl, or all)"
                )))
            }
        };
        for k in parsed {
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
    }
    Ok(kinds)
}

fn read_config_file<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))
}

fn snapshot(dir: &Path, value: &serde_json::Value) -> CliResult<()> {
    write_json(&dir.join("effective_config.json"), value)?;
    Ok(())
}

// ---------------------------------------------------------------- gen ----

fn cmd_gen(args: GenArgs) -> CliResult<()> {
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)
            .map_err(|e| usage(format!("--out {}: {e}", args.out.display())))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(usage(format!(
                "--out {} is not empty; pass --force to regenerate",
                args.out.display()
            )));
        }
        if non_empty {
            // Clear only what a previous run wrote.
            let tasks_dir = args.out.join("tasks");
            if tasks_dir.exists() {
                fs::remove_dir_all(&tasks_dir)
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", tasks_dir.display())))?;
            }
            for stale in ["manifest.json", "effective_config.json"] {
                let p = args.out.join(stale);
                if p.exists() {
                    fs::remove_file(&p)
                        .map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                }
            }
        }
    }
    let manifest = generate_synth_suite(&args.out, args.tasks, args.per_task, args.seed)?;
    snapshot(
        &args.out,
        &serde_json::json!({
            "command": "gen",
            "format_version": 1,
            "tasks": args.tasks,
            "per_task": args.per_task,
            "seed": args.seed,
        }),
    )?;
    println!(
        "wrote {} tasks x {} instances (dim {}) to {}",
        manifest.n_tasks,
        manifest.n_per_task,
        manifest.dim,
        args.out.display()
    );
    Ok(())
}

// -------------------------------------------------------------- label ----

fn cmd_label(args: LabelArgs) -> CliResult<()> {
    require_dir(&args.data, "data")?;
    let config: LabelConfig = match &args.config {
        Some(path) => {
            require_file(path, "config")?;
            read_config_file(path)?
        }
        None => LabelConfig::default(),
    };
    let (_, tasks) = load_suite(&args.data)?;
    let degenerate: Vec<String> = tasks
        .iter()
        .filter_map(|t| check_labelable(t).err().map(|e| e.to_string()))
        .collect();
    if !degenerate.is_empty() {
        return Err(Failure::Runtime(format!(
            "{} unlabelable task(s): {}",
            degenerate.len(),
            degenerate.join("; ")
        )));
    }
    let report = label_suite(&args.data, &tasks, &config, args.seed, args.force)?;
    snapshot(
        &args.data.join("labels"),
        &serde_json::json!({
            "command": "label",
            "format_version": 1,
            "seed": args.seed,
            "config": config,
        }),
    )?;
    println!(
        "labeled {} task(s), {} already cached -> {}",
        report.fitted,
        report.skipped,
        args.data.join("labels").display()
    );
    Ok(())
}

// -------------------------------------------------------------- train ----

fn default_split_fractions() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

/// JSON training-config schema; every field optional, flags override.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    learner: Option<String>,
    head: Option<String>,
    objective: Option<String>,
    seed: Option<u64>,
    n_support: Option<(usize, usize)>,
    n_query: Option<(usize, usize)>,
    batch: Option<usize>,
    max_epochs: Option<usize>,
    val_interval: Option<usize>,
    patience: Option<usize>,
    val_episodes_per_task: Option<usize>,
    lr: Option<f64>,
    pi_clip: Option<f64>,
    split_fractions: Option<(f64, f64, f64)>,
}

fn build_train_config(args: &TrainArgs) -> CliResult<(TrainConfig, (f64, f64, f64))> {
    let file: TrainFile = match &args.config {
        Some(path) => {
            require_file(path, "config")?;
            read_config_file(path)?
        }
        None => TrainFile::default(),
    };
    let mut config = TrainConfig::new(
        LearnerKind::Dr,
        HeadMode::Linear,
        Objective::CateLoss,
        0,
    );
    if let Some(s) = &file.learner {
        config.kind = parse_learner(s)?;
    }
    if let Some(s) = &file.head {
        config.head_mode = parse_head(s)?;
    }
    if let Some(s) = &file.objective {
        config.objective = parse_objective(s)?;
    }
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = file.$field { config.$field = v; })*
        };
    }
    take!(seed, n_support, n_query, batch, max_epochs, val_interval, patience, val_episodes_per_task, lr, pi_clip);
    let mut fractions = file.split_fractions.unwrap_or_else(default_split_fractions);
    // Flags override the file.
    if let Some(s) = &args.learner {
        config.kind = parse_learner(s)?;
    }
    if let Some(s) = &args.head {
        config.head_mode = parse_head(s)?;
    }
    if let Some(s) = &args.objective {
        config.objective = parse_objective(s)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.max_epochs = epochs;
    }
    if let Some(ns) = &args.ns {
        config.n_support = parse_pair(ns, "ns")?;
    }
    if let Some(nq) = &args.nq {
        config.n_query = parse_pair(nq, "nq")?;
    }
    if fractions.0 <= 0.0 {
        fractions = default_split_fractions();
    }
    Ok((config, fractions))
}

fn head_name(mode: HeadMode) -> &'static str {
    match mode {
        HeadMode::Linear => "linear",
        HeadMode::Gp => "gp",
    }
}

fn write_training_log(path: &Path, log: &[LogRecord]) -> CliResult<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    w.write_record(["epoch", "train_loss", "val_loss", "wall_ms"])
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    for r in log {
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        w.write_record([
            r.epoch.to_string(),
            cell(r.train_loss),
            cell(r.val_loss),
            r.wall_ms.to_string(),
        ])
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush()
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    require_dir(&args.data, "data")?;
    let (config, fractions) = build_train_config(&args)?;
    let (manifest, mut tasks) = load_suite(&args.data)?;
    let attached = attach_labels(&args.data, &mut tasks)?;
    let (train_idx, val_idx, test_idx) =
        split_indices(tasks.len(), fractions, derive_seed(config.seed, "split", 0))?;
    if config.objective == Objective::CateLoss {
        let unlabeled: Vec<&str> = train_idx
            .iter()
            .chain(&val_idx)
            .filter(|&&i| tasks[i].pseudo_cate.is_none())
            .map(|&i| tasks[i].id.as_str())
            .collect();
        if !unlabeled.is_empty() {
            return Err(Failure::Runtime(format!(
                "{} task(s) without pseudo-CATE labels (run `metacate label` first): {}",
                unlabeled.len(),
                unlabeled.join(", ")
            )));
        }
    }
    let pick = |idx: &[usize]| -> Vec<TaskData> { idx.iter().map(|&i| tasks[i].clone()).collect() };
    let ids = |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| tasks[i].id.clone()).collect() };
    let train_tasks = pick(&train_idx);
    let val_tasks = pick(&val_idx);

    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    let (shared, log) = meta_train(&train_tasks, &val_tasks, &config)?;

    let checkpoint = Checkpoint {
        format_version: 1,
        input_dim: manifest.dim,
        kind: config.kind,
        head_mode: config.head_mode,
        objective: config.objective,
        pi_clip: config.pi_clip,
        root_seed: config.seed,
        train_ids: ids(&train_idx),
        val_ids: ids(&val_idx),
        test_ids: ids(&test_idx),
        shared,
    };
    let ckpt_path = args.out.join("checkpoint.json");
    checkpoint.save(&ckpt_path)?;
    write_training_log(&args.out.join("training_log.csv"), &log)?;
    snapshot(
        &args.out,
        &serde_json::json!({
            "command": "train",
            "format_version": 1,
            "learner": config.kind.to_string(),
            "head": head_name(config.head_mode),
            "objective": config.objective.to_string(),
            "n_support": config.n_support,
            "n_query": config.n_query,
            "batch": config.batch,
            "max_epochs": config.max_epochs,
            "val_interval": config.val_interval,
            "patience": config.patience,
            "val_episodes_per_task": config.val_episodes_per_task,
            "lr": config.lr,
            "pi_clip": config.pi_clip,
            "seed": config.seed,
            "split_fractions": fractions,
        }),
    )?;
    let best_val = log
        .iter()
        .filter_map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    let epochs_run = log.last().map_or(0, |r| r.epoch);
    println!(
        "trained {}/{} on {} train / {} val tasks ({} labeled), {} epochs, best val loss {:.6}",
        config.kind,
        head_name(config.head_mode),
        train_tasks.len(),
        val_tasks.len(),
        attached,
        epochs_run,
        best_val
    );
    println!("checkpoint -> {}", ckpt_path.display());
    Ok(())
}

// --------------------------------------------------------------- eval ----

fn write_eval_tables(dir: &Path, n_support: usize, outcomes: &[EvalOutcome]) -> CliResult<()> {
    let fail = |p: &Path, e: csv::Error| Failure::Runtime(format!("{}: {e}", p.display()));
    let raw_path = dir.join("raw.csv");
    let mut raw = csv::Writer::from_path(&raw_path).map_err(|e| fail(&raw_path, e))?;
    raw.write_record(["method", "task_id", "repeat", "n_query", "pehe"])
        .map_err(|e| fail(&raw_path, e))?;
    for o in outcomes {
        for s in &o.scores {
            raw.write_record([
                o.method.clone(),
                s.task_id.clone(),
                s.repeat.to_string(),
                s.n_query.to_string(),
                format!("{}", s.pehe),
            ])
            .map_err(|e| fail(&raw_path, e))?;
        }
    }
    raw.flush()
        .map_err(|e| Failure::Runtime(format!("{}: {e}", raw_path.display())))?;

    let summary_path = dir.join("summary.csv");
    let mut sum = csv::Writer::from_path(&summary_path).map_err(|e| fail(&summary_path, e))?;
    sum.write_record(["method", "n_support", "mean_pehe", "se", "episodes"])
        .map_err(|e| fail(&summary_path, e))?;
    for o in outcomes {
        sum.write_record([
            o.method.clone(),
            n_support.to_string(),
            format!("{}", o.mean),
            format!("{}", o.se),
            o.scores.len().to_string(),
        ])
        .map_err(|e| fail(&summary_path, e))?;
    }
    sum.flush()
        .map_err(|e| Failure::Runtime(format!("{}: {e}", summary_path.display())))?;
    Ok(())
}

fn print_summary_table(n_support: usize, outcomes: &[EvalOutcome]) {
    let name_w = outcomes
        .iter()
        .map(|o| o.method.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    println!(
        "{:<name_w$}  {:>9}  {:>10}  {:>8}  {:>8}",
        "method", "n_support", "mean_pehe", "se", "episodes"
    );
    for o in outcomes {
        println!(
            "{:<name_w$}  {:>9}  {:>10.4}  {:>8.4}  {:>8}",
            o.method,
            n_support,
            o.mean,
            o.se,
            o.scores.len()
        );
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    require_dir(&args.data, "data")?;
    require_file(&args.checkpoint, "checkpoint")?;
    let n_support = match &args.ns {
        Some(s) => parse_pair(s, "ns")?,
        None => (3, 3),
    };
    let baselines = match &args.baselines {
        Some(s) => parse_baselines(s)?,
        None => Vec::new(),
    };
    let (manifest, tasks) = load_suite(&args.data)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if ckpt.input_dim != manifest.dim {
        return Err(Failure::Runtime(format!(
            "checkpoint expects input dimension {}, suite has {}",
            ckpt.input_dim, manifest.dim
        )));
    }
    let mut test_tasks = Vec::with_capacity(ckpt.test_ids.len());
    for id in &ckpt.test_ids {
        match tasks.iter().find(|t| &t.id == id) {
            Some(t) => test_tasks.push(t.clone()),
            None => {
                return Err(Failure::Runtime(format!(
                    "checkpoint test task {id:?} is not in the suite"
                )))
            }
        }
    }
    let config = EvalConfig {
        n_support,
        n_repeats: args.repeats,
        seed: args.seed,
    };
    let meta = MetaPredictor {
        shared: &ckpt.shared,
        kind: ckpt.kind,
        head_mode: ckpt.head_mode,
        pi_clip: ckpt.pi_clip,
    };
    let mut predictors: Vec<Box<dyn CatePredictor>> = vec![Box::new(meta)];
    for kind in &baselines {
        predictors.push(Box::new(Baseline { kind: *kind }));
    }
    let mut outcomes = Vec::with_capacity(predictors.len());
    for p in &predictors {
        outcomes.push(evaluate(&test_tasks, p.as_ref(), &config)?);
    }
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    write_eval_tables(&args.out, n_support.0 + n_support.1, &outcomes)?;
    snapshot(
        &args.out,
        &serde_json::json!({
            "command": "eval",
            "format_version": 1,
            "n_support": n_support,
            "repeats": args.repeats,
            "seed": args.seed,
            "baselines": baselines.iter().map(|b| b.to_string()).collect::<Vec<_>>(),
        }),
    )?;
    print_summary_table(n_support.0 + n_support.1, &outcomes);
    println!("report -> {}", args.out.display());
    Ok(())
}
