//! PEHE metric, task-local baselines, and the desk-scale experiment
//! runner.
//!
//! Baselines adapt from scratch on each support set with no meta-learned
//! state: a difference of arm means, a per-arm ridge T-learner, and a
//! single ridge S-learner on features plus treatment. They implement the
//! same predictor interface as the meta-learned model, so every method is
//! scored by the one evaluation harness on identical support draws.
//!
//! The experiment runner repeats: split the suite, meta-train each
//! configured method, and evaluate all methods and baselines on the test
//! tasks with shared episode seeds (paired comparison). It emits a
//! summary table, per-episode raw values, and curve files for the
//! task-count and sample-size sweeps.

use crate::data::{split_indices, write_json, TaskData};
use crate::episodic::{
    evaluate, mean_and_se, meta_train, CatePredictor, EvalConfig, EvalOutcome, MetaPredictor,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::heads::ridge_solve_plain;
use crate::mat::Mat;
use crate::metalearner::{LearnerKind, Support};
use crate::nn::HeadMode;
use crate::seeds::derive_seed;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// Precision in estimating heterogeneous effects: the mean squared error
/// between true and estimated per-instance treatment effects.
pub fn pehe(true_tau: &[f64], est_tau: &[f64]) -> Result<f64> {
    if true_tau.len() != est_tau.len() {
        return Err(Error::Shape {
            op: "pehe",
            detail: format!(
                "{} true effects vs {} estimates",
                true_tau.len(),
                est_tau.len()
            ),
        });
    }
    if true_tau.is_empty() {
        return Err(Error::Evaluation("PEHE of an empty episode".into()));
    }
    let m = true_tau.len() as f64;
    Ok(true_tau
        .iter()
        .zip(est_tau)
        .map(|(t, e)| (t - e) * (t - e))
        .sum::<f64>()
        / m)
}

/// Ridge penalty used by the regression baselines.
pub const BASELINE_RIDGE_LAMBDA: f64 = 1.0;

/// Task-local baseline estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Difference of arm outcome means, constant over queries.
    MeanDiff,
    /// Two ridge regressions on raw features, one per arm.
    TLearnerRidge,
    /// One ridge regression on [features, treatment].
    SLearnerRidge,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::MeanDiff,
        BaselineKind::TLearnerRidge,
        BaselineKind::SLearnerRidge,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::MeanDiff => "mean_diff",
            BaselineKind::TLearnerRidge => "t_learner_ridge",
            BaselineKind::SLearnerRidge => "s_learner_ridge",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_diff" => Ok(BaselineKind::MeanDiff),
            "t_learner_ridge" => Ok(BaselineKind::TLearnerRidge),
            "s_learner_ridge" => Ok(BaselineKind::SLearnerRidge),
            other => Err(Error::Config(format!(
                "unknown baseline {other:?} (expected mean_diff, t_learner_ridge, or s_learner_ridge)"
            ))),
        }
    }
}

fn arm_rows(a: &[u8], arm: u8, kind: BaselineKind) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] == arm).collect();
    if rows.is_empty() {
        return Err(Error::Evaluation(format!(
            "baseline {kind}: support arm {arm} is empty"
        )));
    }
    Ok(rows)
}

fn rows_of(x: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j))
}

fn dot_rows(x: &Mat, theta: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| (0..x.cols()).map(|j| x.get(i, j) * theta[j]).sum())
        .collect()
}

/// Fit a baseline on the support and predict the CATE at the query rows.
pub fn baseline_predict(
    kind: BaselineKind,
    support: Support<'_>,
    x_query: &Mat,
) -> Result<Vec<f64>> {
    let rows0 = arm_rows(support.a, 0, kind)?;
    let rows1 = arm_rows(support.a, 1, kind)?;
    match kind {
        BaselineKind::MeanDiff => {
            let mean = |rows: &[usize]| {
                rows.iter().map(|&i| support.y[i]).sum::<f64>() / rows.len() as f64
            };
            let diff = mean(&rows1) - mean(&rows0);
            Ok(vec![diff; x_query.rows()])
        }
        BaselineKind::TLearnerRidge => {
            let fit = |rows: &[usize]| -> Result<Vec<f64>> {
                let x = rows_of(support.x, rows);
                let y: Vec<f64> = rows.iter().map(|&i| support.y[i]).collect();
                ridge_solve_plain(&x, &y, BASELINE_RIDGE_LAMBDA)
            };
            let theta0 = fit(&rows0)?;
            let theta1 = fit(&rows1)?;
            let p0 = dot_rows(x_query, &theta0);
            let p1 = dot_rows(x_query, &theta1);
            Ok(p1.iter().zip(&p0).map(|(a, b)| a - b).collect())
        }
        BaselineKind::SLearnerRidge => {
            let n = support.y.len();
            let d = support.x.cols();
            let design = Mat::from_fn(n, d + 1, |i, j| {
                if j < d {
                    support.x.get(i, j)
                } else {
                    f64::from(support.a[i])
                }
            });
            let theta = ridge_solve_plain(&design, support.y, BASELINE_RIDGE_LAMBDA)?;
            let with_arm = |arm: f64| {
                Mat::from_fn(x_query.rows(), d + 1, |i, j| {
                    if j < d {
                        x_query.get(i, j)
                    } else {
                        arm
                    }
                })
            };
            let p1 = dot_rows(&with_arm(1.0), &theta);
            let p0 = dot_rows(&with_arm(0.0), &theta);
            Ok(p1.iter().zip(&p0).map(|(a, b)| a - b).collect())
        }
    }
}

/// Baseline wrapped as a predictor for the shared evaluation harness.
pub struct Baseline {
    pub kind: BaselineKind,
}

impl CatePredictor for Baseline {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn predict(&self, support: Support<'_>, x_query: &Mat) -> Result<Vec<f64>> {
        baseline_predict(self.kind, support, x_query)
    }
}

/// One meta-learned method to train and score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub kind: LearnerKind,
    pub head_mode: HeadMode,
    pub objective: crate::episodic::Objective,
}

/// The standard method list; the first entry is the headline method used
/// for the task-count and sample-size curves.
pub fn default_methods() -> Vec<MethodSpec> {
    use crate::episodic::Objective::{CateLoss, SubproblemLoss};
    vec![
        MethodSpec {
            name: "ours_dr".into(),
            kind: LearnerKind::Dr,
            head_mode: HeadMode::Linear,
            objective: CateLoss,
        },
        MethodSpec {
            name: "ours_ra".into(),
            kind: LearnerKind::Ra,
            head_mode: HeadMode::Linear,
            objective: CateLoss,
        },
        MethodSpec {
            name: "ours_plugin".into(),
            kind: LearnerKind::Plugin,
            head_mode: HeadMode::Linear,
            objective: CateLoss,
        },
        MethodSpec {
            name: "ours_dr_gp".into(),
            kind: LearnerKind::Dr,
            head_mode: HeadMode::Gp,
            objective: CateLoss,
        },
        MethodSpec {
            name: "ablation_subproblem".into(),
            kind: LearnerKind::Dr,
            head_mode: HeadMode::Linear,
            objective: SubproblemLoss,
        },
    ]
}

/// Scored method at one support size: mean ± SE over all pooled episode
/// values, which are kept for recomputation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeheSummary {
    pub method: String,
    pub n_support: usize,
    pub mean: f64,
    pub se: f64,
    pub values: Vec<f64>,
    pub repeat_seeds: Vec<u64>,
}

/// One point of a sweep curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: usize,
    pub mean: f64,
    pub se: f64,
}

/// Experiment layout: methods, support sizes, sweeps, repeats, split
/// fractions, and the training template applied to every method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<MethodSpec>,
    pub include_baselines: bool,
    /// Per-arm support sizes; one summary column per entry.
    pub support_sizes: Vec<(usize, usize)>,
    /// Meta-training pool sizes for the task-count curve, ascending; the
    /// largest must fit in the train split and is the size every method
    /// trains at.
    pub task_counts: Vec<usize>,
    pub split_fractions: (f64, f64, f64),
    pub n_repeats: usize,
    /// Evaluation episodes per test task.
    pub eval_repeats: usize,
    /// Template for every method's training run; kind, head mode, and
    /// objective are overridden per method.
    pub train: TrainConfig,
    pub seed: u64,
}

/// Everything the runner produced (also written to the output directory).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub summaries: Vec<PeheSummary>,
    pub task_curve: Vec<CurvePoint>,
    pub sample_curve: Vec<CurvePoint>,
}

#[derive(Clone, Debug)]
struct RawRow {
    method: String,
    n_support: usize,
    task_count: usize,
    repeat: usize,
    task_id: String,
    eval_repeat: usize,
    pehe: f64,
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::Validation {
            path: path.display().to_string(),
            detail: format!("csv write failed: {other:?}"),
        },
    }
}

fn eval_outcome_rows(
    outcome: &EvalOutcome,
    method: &str,
    n_support: usize,
    task_count: usize,
    repeat: usize,
) -> Vec<RawRow> {
    outcome
        .scores
        .iter()
        .map(|s| RawRow {
            method: method.to_string(),
            n_support,
            task_count,
            repeat,
            task_id: s.task_id.clone(),
            eval_repeat: s.repeat,
            pehe: s.pehe,
        })
        .collect()
}

fn train_for(template: &TrainConfig, spec: &MethodSpec, seed: u64) -> TrainConfig {
    let mut c = template.clone();
    c.kind = spec.kind;
    c.head_mode = spec.head_mode;
    c.objective = spec.objective;
    c.seed = seed;
    c
}

/// Run the full comparison and write `summary.csv`, `raw.csv`,
/// `curves/*.csv`, and a `config.json` snapshot under `out_dir`.
///
/// `sample_sweeps` are optional extra suites keyed by their per-task
/// sample size; the headline method is retrained on each to produce the
/// sample-size curve.
pub fn run_experiment(
    tasks: &[TaskData],
    sample_sweeps: &[(usize, Vec<TaskData>)],
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    if config.methods.is_empty() {
        return Err(Error::Config("experiment needs at least one method".into()));
    }
    if config.support_sizes.is_empty() || config.n_repeats == 0 || config.eval_repeats == 0 {
        return Err(Error::Config(
            "experiment needs support sizes, repeats, and evaluation repeats".into(),
        ));
    }
    let mut counts = config.task_counts.clone();
    counts.sort_unstable();
    counts.dedup();
    if counts.is_empty() {
        return Err(Error::Config("experiment needs at least one task count".into()));
    }
    let full = *counts.last().expect("non-empty");

    fs::create_dir_all(out_dir.join("curves"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut raw: Vec<RawRow> = Vec::new();
    let mut repeat_seeds = Vec::with_capacity(config.n_repeats);
    // (task_count, pooled episode values) for the headline-method curve.
    let mut curve_values: Vec<(usize, Vec<f64>)> =
        counts.iter().map(|&k| (k, Vec::new())).collect();
    let mut sample_values: Vec<(usize, Vec<f64>)> =
        sample_sweeps.iter().map(|(n, _)| (*n, Vec::new())).collect();

    for repeat in 0..config.n_repeats {
        let split_seed = derive_seed(config.seed, "split", repeat as u64);
        repeat_seeds.push(split_seed);
        let (train_idx, val_idx, test_idx) =
            split_indices(tasks.len(), config.split_fractions, split_seed)?;
        if train_idx.len() < full {
            return Err(Error::Config(format!(
                "task count {} exceeds the train split ({} of {} tasks)",
                full,
                train_idx.len(),
                tasks.len()
            )));
        }
        let pick = |idx: &[usize]| -> Vec<TaskData> {
            idx.iter().map(|&i| tasks[i].clone()).collect()
        };
        let train_pool = pick(&train_idx);
        let val_tasks = pick(&val_idx);
        let test_tasks = pick(&test_idx);
        let train_seed = derive_seed(config.seed, "train", repeat as u64);
        let eval_seed = derive_seed(config.seed, "eval", repeat as u64);

        for (m, spec) in config.methods.iter().enumerate() {
            let tc = train_for(&config.train, spec, train_seed);
            let (shared, _log) = meta_train(&train_pool[..full], &val_tasks, &tc)
                .map_err(|e| Error::Evaluation(format!(
                    "repeat {repeat}, method {}: {e}",
                    spec.name
                )))?;
            let predictor = MetaPredictor {
                shared: &shared,
                kind: spec.kind,
                head_mode: spec.head_mode,
                pi_clip: tc.pi_clip,
            };
            for &n_s in &config.support_sizes {
                let eval_cfg = EvalConfig {
                    n_support: n_s,
                    n_repeats: config.eval_repeats,
                    seed: eval_seed,
                };
                let outcome = evaluate(&test_tasks, &predictor, &eval_cfg)?;
                let n_total = n_s.0 + n_s.1;
                if m == 0 && n_s == config.support_sizes[0] {
                    let values: Vec<f64> = outcome.scores.iter().map(|s| s.pehe).collect();
                    curve_values
                        .iter_mut()
                        .find(|(k, _)| *k == full)
                        .expect("full count present")
                        .1
                        .extend(values);
                }
                raw.extend(eval_outcome_rows(&outcome, &spec.name, n_total, full, repeat));
            }
        }

        // Task-count curve: retrain the headline method on nested subsets.
        let headline = &config.methods[0];
        for &k in counts.iter().filter(|&&k| k != full) {
            let tc = train_for(&config.train, headline, train_seed);
            let (shared, _log) = meta_train(&train_pool[..k], &val_tasks, &tc)
                .map_err(|e| Error::Evaluation(format!(
                    "repeat {repeat}, task-count {k}: {e}"
                )))?;
            let predictor = MetaPredictor {
                shared: &shared,
                kind: headline.kind,
                head_mode: headline.head_mode,
                pi_clip: tc.pi_clip,
            };
            let n_s = config.support_sizes[0];
            let eval_cfg = EvalConfig {
                n_support: n_s,
                n_repeats: config.eval_repeats,
                seed: eval_seed,
            };
            let outcome = evaluate(&test_tasks, &predictor, &eval_cfg)?;
            let values: Vec<f64> = outcome.scores.iter().map(|s| s.pehe).collect();
            curve_values
                .iter_mut()
                .find(|(c, _)| *c == k)
                .expect("count fixed above")
                .1
                .extend(values);
            raw.extend(eval_outcome_rows(
                &outcome,
                &headline.name,
                n_s.0 + n_s.1,
                k,
                repeat,
            ));
        }

        // Sample-size curve: retrain the headline method on each suite.
        for ((n_per_task, suite), (_, values)) in sample_sweeps.iter().zip(&mut sample_values) {
            let (s_train, s_val, s_test) =
                split_indices(suite.len(), config.split_fractions, split_seed)?;
            let spick = |idx: &[usize]| -> Vec<TaskData> {
                idx.iter().map(|&i| suite[i].clone()).collect()
            };
            let tc = train_for(&config.train, headline, train_seed);
            let (shared, _log) = meta_train(&spick(&s_train), &spick(&s_val), &tc)
                .map_err(|e| Error::Evaluation(format!(
                    "repeat {repeat}, sample size {n_per_task}: {e}"
                )))?;
            let predictor = MetaPredictor {
                shared: &shared,
                kind: headline.kind,
                head_mode: headline.head_mode,
                pi_clip: tc.pi_clip,
            };
            let eval_cfg = EvalConfig {
                n_support: config.support_sizes[0],
                n_repeats: config.eval_repeats,
                seed: eval_seed,
            };
            let outcome = evaluate(&spick(&s_test), &predictor, &eval_cfg)?;
            values.extend(outcome.scores.iter().map(|s| s.pehe));
        }

        if config.include_baselines {
            for kind in BaselineKind::ALL {
                let baseline = Baseline { kind };
                for &n_s in &config.support_sizes {
                    let eval_cfg = EvalConfig {
                        n_support: n_s,
                        n_repeats: config.eval_repeats,
                        seed: eval_seed,
                    };
                    let outcome = evaluate(&test_tasks, &baseline, &eval_cfg)?;
                    raw.extend(eval_outcome_rows(
                        &outcome,
                        &kind.to_string(),
                        n_s.0 + n_s.1,
                        full,
                        repeat,
                    ));
                }
            }
        }
        // Splits are regenerated from the seed; ids are not persisted here.
        let _ = (&test_idx, &val_idx);
    }

    // Summaries pool every episode value of (method, n_s) at the full
    // training size.
    let mut method_names: Vec<String> = config.methods.iter().map(|m| m.name.clone()).collect();
    if config.include_baselines {
        method_names.extend(BaselineKind::ALL.iter().map(|k| k.to_string()));
    }
    let mut summaries = Vec::new();
    for name in &method_names {
        for &n_s in &config.support_sizes {
            let n_total = n_s.0 + n_s.1;
            let values: Vec<f64> = raw
                .iter()
                .filter(|r| &r.method == name && r.n_support == n_total && r.task_count == full)
                .map(|r| r.pehe)
                .collect();
            let (mean, se) = mean_and_se(&values);
            summaries.push(PeheSummary {
                method: name.clone(),
                n_support: n_total,
                mean,
                se,
                values,
                repeat_seeds: repeat_seeds.clone(),
            });
        }
    }

    let curve_point = |(x, values): &(usize, Vec<f64>)| {
        let (mean, se) = mean_and_se(values);
        CurvePoint { x: *x, mean, se }
    };
    let task_curve: Vec<CurvePoint> = curve_values.iter().map(curve_point).collect();
    let sample_curve: Vec<CurvePoint> = sample_values.iter().map(curve_point).collect();

    raw.sort_by(|a, b| {
        (&a.method, a.n_support, a.task_count, a.repeat, &a.task_id, a.eval_repeat).cmp(&(
            &b.method,
            b.n_support,
            b.task_count,
            b.repeat,
            &b.task_id,
            b.eval_repeat,
        ))
    });

    // summary.csv: one row per method × support size.
    let path = out_dir.join("summary.csv");
    {
        let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
        w.write_record(["method", "n_support", "mean_pehe", "se", "episodes"])
            .map_err(csv_io(&path))?;
        for s in &summaries {
            w.write_record([
                s.method.clone(),
                s.n_support.to_string(),
                format!("{}", s.mean),
                format!("{}", s.se),
                s.values.len().to_string(),
            ])
            .map_err(csv_io(&path))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }

    // raw.csv: every scored episode.
    let path = out_dir.join("raw.csv");
    {
        let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
        w.write_record([
            "method",
            "n_support",
            "task_count",
            "repeat",
            "task_id",
            "eval_repeat",
            "pehe",
        ])
        .map_err(csv_io(&path))?;
        for r in &raw {
            w.write_record([
                r.method.clone(),
                r.n_support.to_string(),
                r.task_count.to_string(),
                r.repeat.to_string(),
                r.task_id.clone(),
                r.eval_repeat.to_string(),
                format!("{}", r.pehe),
            ])
            .map_err(csv_io(&path))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }

    let write_curve = |file: &str, points: &[CurvePoint], x_name: &str| -> Result<()> {
        let path = out_dir.join("curves").join(file);
        let mut w = csv::Writer::from_path(&path).map_err(csv_io(&path))?;
        w.write_record([x_name, "mean_pehe", "se"]).map_err(csv_io(&path))?;
        for p in points {
            w.write_record([p.x.to_string(), format!("{}", p.mean), format!("{}", p.se)])
                .map_err(csv_io(&path))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))
    };
    write_curve("tasks.csv", &task_curve, "n_train_tasks")?;
    if !sample_curve.is_empty() {
        write_curve("samples.csv", &sample_curve, "n_per_task")?;
    }

    write_json(&out_dir.join("config.json"), config)?;

    Ok(ExperimentReport {
        summaries,
        task_curve,
        sample_curve,
    })
}
