//! Pseudo-CATE labeling: fit a conventional regression-adjusted learner
//! on each task's full data and store its per-instance effect estimates
//! as training labels.
//!
//! Three MLP regressions per task, each a 3-layer/32-unit network with a
//! linear readout: μ̂₀ on the control arm, μ̂₁ on the treated arm, and an
//! effect model τ̂ on the regression-adjusted pseudo-outcomes built from
//! the first two. Every fit uses minibatch Adam with a holdout split,
//! periodic validation, patience-based early stopping, and best-snapshot
//! restore. Labels are persisted next to the task files so meta-training
//! never re-fits them.

use crate::data::{read_json, write_json, TaskData};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::metalearner::ra_pseudo_outcome;
use crate::nn::{encode, Adam, BoundEncoder, EncoderParams, ENCODED_DIM};
use crate::seeds::{derive_seed, rng_for};
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

fn default_label_max_epochs() -> usize {
    2000
}
fn default_label_batch() -> usize {
    16
}
fn default_label_lr() -> f64 {
    1e-3
}
fn default_holdout_frac() -> f64 {
    0.1
}
fn default_label_patience() -> usize {
    20
}
fn default_label_val_interval() -> usize {
    10
}

/// Hyperparameters of one labeling fit (all three regressions share them).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    #[serde(default = "default_label_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_label_batch")]
    pub batch: usize,
    #[serde(default = "default_label_lr")]
    pub lr: f64,
    /// Fraction of rows held out for early stopping.
    #[serde(default = "default_holdout_frac")]
    pub holdout_frac: f64,
    /// Stop after this many validation checks without improvement.
    #[serde(default = "default_label_patience")]
    pub patience: usize,
    /// Validate every this many epochs.
    #[serde(default = "default_label_val_interval")]
    pub val_interval: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            max_epochs: default_label_max_epochs(),
            batch: default_label_batch(),
            lr: default_label_lr(),
            holdout_frac: default_holdout_frac(),
            patience: default_label_patience(),
            val_interval: default_label_val_interval(),
        }
    }
}

impl LabelConfig {
    fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 || self.batch < 1 || self.patience < 1 || self.val_interval < 1 {
            return Err(Error::Parameter {
                name: "label_config",
                detail: "epochs, batch, patience, and validation interval must be at least 1"
                    .into(),
            });
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 0.5) {
            return Err(Error::Parameter {
                name: "holdout_frac",
                detail: format!("{} outside (0, 0.5)", self.holdout_frac),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter {
                name: "lr",
                detail: format!("learning rate {} must be positive", self.lr),
            });
        }
        Ok(())
    }

    /// Stable hash of the configuration, stored in label sidecars so a
    /// config change invalidates cached labels.
    pub fn hash(&self) -> String {
        let body = serde_json::to_string(self).expect("plain struct serializes");
        let digest = Sha256::digest(body.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Diagnostics of one MLP fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub name: String,
    pub epochs_run: usize,
    pub best_holdout_mse: f64,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

/// Labels for one task plus how they were fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoCateLabels {
    pub task_id: String,
    pub values: Vec<f64>,
    pub fits: Vec<FitDiagnostics>,
}

/// One regression network: the shared 3-layer encoder plus a linear
/// readout to a single output.
#[derive(Clone, Debug)]
struct MlpParams {
    enc: EncoderParams,
    w4: Mat,
    b4: Mat,
}

impl MlpParams {
    fn init(d: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "mlp-init", 0);
        let enc = EncoderParams::glorot(d, &mut rng);
        let lim = (6.0 / (ENCODED_DIM as f64 + 1.0)).sqrt();
        let w4 = Mat::from_fn(ENCODED_DIM, 1, |_, _| rng.gen_range(-lim..lim));
        MlpParams {
            enc,
            w4,
            b4: Mat::zeros(1, 1),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("enc.w1", &mut self.enc.w1);
        f("enc.b1", &mut self.enc.b1);
        f("enc.w2", &mut self.enc.w2);
        f("enc.b2", &mut self.enc.b2);
        f("enc.w3", &mut self.enc.w3);
        f("enc.b3", &mut self.enc.b3);
        f("w4", &mut self.w4);
        f("b4", &mut self.b4);
    }
}

struct BoundMlp {
    enc: BoundEncoder,
    w4: NodeId,
    b4: NodeId,
}

fn bind_mlp(tape: &mut Tape, p: &MlpParams) -> Result<(BoundMlp, BTreeMap<String, NodeId>)> {
    let bound = BoundMlp {
        enc: BoundEncoder {
            w1: tape.var(p.enc.w1.clone())?,
            b1: tape.var(p.enc.b1.clone())?,
            w2: tape.var(p.enc.w2.clone())?,
            b2: tape.var(p.enc.b2.clone())?,
            w3: tape.var(p.enc.w3.clone())?,
            b3: tape.var(p.enc.b3.clone())?,
        },
        w4: tape.var(p.w4.clone())?,
        b4: tape.var(p.b4.clone())?,
    };
    let mut ids = BTreeMap::new();
    ids.insert("enc.w1".to_string(), bound.enc.w1);
    ids.insert("enc.b1".to_string(), bound.enc.b1);
    ids.insert("enc.w2".to_string(), bound.enc.w2);
    ids.insert("enc.b2".to_string(), bound.enc.b2);
    ids.insert("enc.w3".to_string(), bound.enc.w3);
    ids.insert("enc.b3".to_string(), bound.enc.b3);
    ids.insert("w4".to_string(), bound.w4);
    ids.insert("b4".to_string(), bound.b4);
    Ok((bound, ids))
}

fn mlp_forward(tape: &mut Tape, bound: &BoundMlp, x: NodeId) -> Result<NodeId> {
    let z = encode(tape, &bound.enc, x)?;
    let linear = tape.matmul(z, bound.w4)?;
    let n = tape.value(linear).rows();
    let ones = tape.constant(Mat::filled(n, 1, 1.0))?;
    let bias = tape.matmul(ones, bound.b4)?;
    tape.add(linear, bias)
}

/// Predictions of a fitted network on a full feature matrix (no tape kept).
fn mlp_predict(params: &MlpParams, x: &Mat) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (bound, _) = bind_mlp(&mut tape, params)?;
    let xn = tape.constant(x.clone())?;
    let out = mlp_forward(&mut tape, &bound, xn)?;
    Ok(tape.value(out).data().to_vec())
}

fn mse_of(params: &MlpParams, x: &Mat, targets: &[f64]) -> Result<f64> {
    let pred = mlp_predict(params, x)?;
    let n = targets.len().max(1);
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64)
}

/// One minibatch-Adam regression with holdout early stopping and
/// best-snapshot restore. Deterministic in the seed.
fn fit_mlp(
    name: &str,
    x: &Mat,
    targets: &[f64],
    config: &LabelConfig,
    seed: u64,
) -> Result<(MlpParams, FitDiagnostics)> {
    let n = targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "holdout", 0));
    let n_hold = ((config.holdout_frac * n as f64).floor() as usize).clamp(1, n - 1);
    let holdout: Vec<usize> = order[..n_hold].to_vec();
    let train: Vec<usize> = order[n_hold..].to_vec();

    let gather = |rows: &[usize]| -> (Mat, Vec<f64>) {
        (
            Mat::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j)),
            rows.iter().map(|&i| targets[i]).collect(),
        )
    };
    let (hold_x, hold_y) = gather(&holdout);

    let mut params = MlpParams::init(x.cols(), derive_seed(seed, "init", 0));
    let mut adam = Adam::new(config.lr);
    let mut best = params.clone();
    let mut best_mse = mse_of(&params, &hold_x, &hold_y)?;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;

    let mut train_order = train.clone();
    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        train_order.shuffle(&mut rng_for(seed, "shuffle", epoch as u64));
        for chunk in train_order.chunks(config.batch) {
            let (bx, by) = gather(chunk);
            let mut tape = Tape::new();
            let (bound, ids) = bind_mlp(&mut tape, &params)?;
            let xn = tape.constant(bx)?;
            let pred = mlp_forward(&mut tape, &bound, xn)?;
            let target = tape.constant(Mat::col_vec(&by))?;
            let resid = tape.sub(pred, target)?;
            let sq = tape.square(resid)?;
            let total = tape.sum(sq)?;
            let loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let grads = tape.backward(loss)?;
            let mut named = BTreeMap::new();
            for (name, id) in &ids {
                if let Some(g) = grads.get(*id) {
                    named.insert(name.clone(), g.clone());
                }
            }
            adam.step_visit(|f| params.visit_mut(f), &named)?;
        }
        if epoch % config.val_interval == 0 {
            let mse = mse_of(&params, &hold_x, &hold_y)?;
            if mse < best_mse {
                best_mse = mse;
                best = params.clone();
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((
        best,
        FitDiagnostics {
            name: name.to_string(),
            epochs_run,
            best_holdout_mse: best_mse,
            train_rows: train.len(),
            holdout_rows: holdout.len(),
        },
    ))
}

/// Check that a task is large and balanced enough to label.
pub fn check_labelable(task: &TaskData) -> Result<()> {
    let fail = |detail: String| Error::Labeling {
        task: task.id.clone(),
        detail,
    };
    let n = task.len();
    if n < 20 {
        return Err(fail(format!("{n} instances; labeling needs at least 20")));
    }
    for arm in [0u8, 1u8] {
        let count = task.arm_indices(arm).len();
        if count < 5 {
            return Err(fail(format!(
                "arm {arm} has {count} instances; labeling needs at least 5 per arm"
            )));
        }
    }
    Ok(())
}

/// Fit the three-regression labeling pipeline on one task and return a
/// pseudo-CATE label for every instance.
pub fn fit_pseudo_cate(
    task: &TaskData,
    config: &LabelConfig,
    seed: u64,
) -> Result<PseudoCateLabels> {
    config.validate()?;
    check_labelable(task)?;
    let n = task.len();
    let fail = |detail: String| Error::Labeling {
        task: task.id.clone(),
        detail,
    };

    let gather = |rows: &[usize]| -> (Mat, Vec<f64>) {
        (
            Mat::from_fn(rows.len(), task.x.cols(), |i, j| task.x.get(rows[i], j)),
            rows.iter().map(|&i| task.y[i]).collect(),
        )
    };
    let rows0 = task.arm_indices(0);
    let rows1 = task.arm_indices(1);
    let (x0, y0) = gather(&rows0);
    let (x1, y1) = gather(&rows1);
    let (mu0, diag0) = fit_mlp("mu0", &x0, &y0, config, derive_seed(seed, "mu0", 0))?;
    let (mu1, diag1) = fit_mlp("mu1", &x1, &y1, config, derive_seed(seed, "mu1", 0))?;

    let mu0_all = mlp_predict(&mu0, &task.x)?;
    let mu1_all = mlp_predict(&mu1, &task.x)?;
    let pseudo: Vec<f64> = (0..n)
        .map(|i| ra_pseudo_outcome(task.y[i], task.a[i], mu0_all[i], mu1_all[i]))
        .collect();

    let (tau, diag_tau) = fit_mlp("tau", &task.x, &pseudo, config, derive_seed(seed, "tau", 0))?;
    let values = mlp_predict(&tau, &task.x)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(fail("labeling produced a non-finite value".into()));
    }
    Ok(PseudoCateLabels {
        task_id: task.id.clone(),
        values,
        fits: vec![diag0, diag1, diag_tau],
    })
}

/// Label every task with a per-task seed derived from the task id, in
/// parallel. Purely in memory; see `label_suite` for cached persistence.
pub fn label_all_tasks(
    tasks: &[TaskData],
    config: &LabelConfig,
    seed: u64,
) -> Result<Vec<PseudoCateLabels>> {
    tasks
        .par_iter()
        .map(|task| {
            fit_pseudo_cate(task, config, task_label_seed(seed, &task.id)).map_err(|e| match e {
                Error::Labeling { task, detail } => Error::Labeling { task, detail },
                other => Error::Labeling {
                    task: task.id.clone(),
                    detail: other.to_string(),
                },
            })
        })
        .collect()
}

/// Per-task labeling seed, stable under task-list reordering.
pub fn task_label_seed(root: u64, task_id: &str) -> u64 {
    derive_seed(root, &format!("label:{task_id}"), 0)
}

/// Sidecar stored next to each label file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelMeta {
    pub format_version: u32,
    pub task_id: String,
    pub seed: u64,
    pub config: LabelConfig,
    pub config_hash: String,
    pub n_rows: usize,
    pub fits: Vec<FitDiagnostics>,
}

pub fn labels_csv_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join("labels").join(format!("{task_id}.labels.csv"))
}

pub fn labels_meta_path(dir: &Path, task_id: &str) -> PathBuf {
    dir.join("labels").join(format!("{task_id}.labels.meta.json"))
}

/// Write one task's labels as (row_index, pseudo_cate) plus the sidecar.
pub fn save_labels(
    dir: &Path,
    labels: &PseudoCateLabels,
    config: &LabelConfig,
    seed: u64,
) -> Result<()> {
    let labels_dir = dir.join("labels");
    fs::create_dir_all(&labels_dir)
        .map_err(|e| Error::io(labels_dir.display().to_string(), e))?;
    let path = labels_csv_path(dir, &labels.task_id);
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::Validation {
            path: path.display().to_string(),
            detail: format!("csv write failed: {other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(&path).map_err(io_err)?;
    w.write_record(["row_index", "pseudo_cate"]).map_err(io_err)?;
    for (i, v) in labels.values.iter().enumerate() {
        w.write_record([i.to_string(), format!("{v}")]).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    let meta = LabelMeta {
        format_version: 1,
        task_id: labels.task_id.clone(),
        seed,
        config: config.clone(),
        config_hash: config.hash(),
        n_rows: labels.values.len(),
        fits: labels.fits.clone(),
    };
    write_json(&labels_meta_path(dir, &labels.task_id), &meta)
}

/// Load one task's persisted labels, or None when absent.
pub fn load_labels(dir: &Path, task_id: &str) -> Result<Option<(Vec<f64>, LabelMeta)>> {
    let csv_path = labels_csv_path(dir, task_id);
    let meta_path = labels_meta_path(dir, task_id);
    if !csv_path.exists() || !meta_path.exists() {
        return Ok(None);
    }
    let meta: LabelMeta = read_json(&meta_path)?;
    let display = csv_path.display().to_string();
    let mut rdr = csv::Reader::from_path(&csv_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(display.clone(), io),
        other => Error::Parse {
            path: display.clone(),
            line: 0,
            detail: format!("{other:?}"),
        },
    })?;
    let mut values = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let idx: usize = record
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                path: display.clone(),
                line,
                detail: "bad row index".into(),
            })?;
        if idx != i {
            return Err(Error::Validation {
                path: display.clone(),
                detail: format!("row index {idx} at position {i}; label files must be dense"),
            });
        }
        let v: f64 = record
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                path: display.clone(),
                line,
                detail: "bad label value".into(),
            })?;
        if !v.is_finite() {
            return Err(Error::Validation {
                path: display,
                detail: format!("non-finite label at row {i}"),
            });
        }
        values.push(v);
    }
    if values.len() != meta.n_rows {
        return Err(Error::Validation {
            path: display,
            detail: format!("{} labels, sidecar says {}", values.len(), meta.n_rows),
        });
    }
    Ok(Some((values, meta)))
}

/// Outcome of a suite labeling pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteLabelReport {
    pub fitted: usize,
    pub skipped: usize,
}

fn cache_is_valid(
    dir: &Path,
    task: &TaskData,
    config: &LabelConfig,
    expected_seed: u64,
) -> Result<bool> {
    match load_labels(dir, &task.id) {
        Ok(Some((values, meta))) => Ok(meta.config_hash == config.hash()
            && meta.seed == expected_seed
            && values.len() == task.len()),
        Ok(None) => Ok(false),
        // A corrupt cache entry is refit rather than fatal.
        Err(_) => Ok(false),
    }
}

/// Label every task of a suite, persisting under `dir/labels/`. Tasks with
/// a valid cached label file are skipped unless `force` is set, so reruns
/// are idempotent.
pub fn label_suite(
    dir: &Path,
    tasks: &[TaskData],
    config: &LabelConfig,
    seed: u64,
    force: bool,
) -> Result<SuiteLabelReport> {
    config.validate()?;
    let todo: Vec<&TaskData> = tasks
        .iter()
        .map(|t| -> Result<Option<&TaskData>> {
            let expected = task_label_seed(seed, &t.id);
            if !force && cache_is_valid(dir, t, config, expected)? {
                Ok(None)
            } else {
                Ok(Some(t))
            }
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let skipped = tasks.len() - todo.len();
    let fitted = todo
        .par_iter()
        .map(|task| -> Result<()> {
            let task_seed = task_label_seed(seed, &task.id);
            let labels = fit_pseudo_cate(task, config, task_seed)?;
            save_labels(dir, &labels, config, task_seed)
        })
        .collect::<Result<Vec<()>>>()?
        .len();
    Ok(SuiteLabelReport { fitted, skipped })
}

/// Attach persisted labels to loaded tasks; returns how many were found.
pub fn attach_labels(dir: &Path, tasks: &mut [TaskData]) -> Result<usize> {
    let mut attached = 0;
    for task in tasks.iter_mut() {
        if let Some((values, _)) = load_labels(dir, &task.id)? {
            if values.len() != task.len() {
                return Err(Error::Validation {
                    path: labels_csv_path(dir, &task.id).display().to_string(),
                    detail: format!(
                        "{} labels for task {} with {} rows",
                        values.len(),
                        task.id,
                        task.len()
                    ),
                });
            }
            task.pseudo_cate = Some(values);
            attached += 1;
        }
    }
    Ok(attached)
}
