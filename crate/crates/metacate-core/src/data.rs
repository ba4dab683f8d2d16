//! Synthetic CATE task generation, task-file I/O, and train/val/test
//! splitting.
//!
//! A generated task draws 25-dimensional standard-normal features and
//! three disjoint 5-index subsets: confounders x_c drive treatment
//! assignment through a median-centered squared-form propensity,
//! [x_c, x_o] drive the control outcome, and x_τ carries the treatment
//! effect. Both potential outcomes receive independent standard Gaussian
//! noise, and the noiseless effect μ₁−μ₀ is stored as the true CATE.
//! Treatment assignment and outcome noise come from independent named
//! RNG substreams, so ignorability holds structurally.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::seeds::{derive_seed, rng_for};
use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Feature dimension of the synthetic generator.
pub const SYNTH_DIM: usize = 25;

/// One task's observations plus optional effect columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub id: String,
    pub x: Mat,
    pub y: Vec<f64>,
    pub a: Vec<u8>,
    pub true_cate: Option<Vec<f64>>,
    pub pseudo_cate: Option<Vec<f64>>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Row indices belonging to one treatment arm.
    pub fn arm_indices(&self, arm: u8) -> Vec<usize> {
        (0..self.a.len()).filter(|&i| self.a[i] == arm).collect()
    }

    /// Check the structural invariants (consistent lengths, binary
    /// treatments, both arms populated, finite values).
    pub fn validate(&self, origin: &str) -> Result<()> {
        let n = self.y.len();
        let bad = |detail: String| Error::Validation {
            path: origin.to_string(),
            detail,
        };
        if self.x.rows() != n || self.a.len() != n {
            return Err(bad(format!(
                "inconsistent lengths: {} feature rows, {} outcomes, {} treatments",
                self.x.rows(),
                n,
                self.a.len()
            )));
        }
        for col in [&self.true_cate, &self.pseudo_cate].into_iter().flatten() {
            if col.len() != n {
                return Err(bad(format!(
                    "effect column has {} entries for {} rows",
                    col.len(),
                    n
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite effect value".into()));
            }
        }
        if self.a.iter().any(|&v| v > 1) {
            return Err(bad("treatment column contains values outside {0,1}".into()));
        }
        if !self.x.is_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature or outcome".into()));
        }
        if n > 0 {
            let n1: usize = self.a.iter().map(|&v| v as usize).sum();
            if n1 == 0 || n1 == n {
                return Err(bad(format!(
                    "single-arm task: {} of {} instances treated",
                    n1, n
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to regenerate a synthetic task: index subsets, weight
/// vectors, the propensity centering constant, and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub seed: u64,
    pub n: usize,
    /// Confounder indices (drive treatment assignment).
    pub idx_confounder: Vec<usize>,
    /// Outcome-only indices.
    pub idx_outcome: Vec<usize>,
    /// Effect-modifier indices.
    pub idx_effect: Vec<usize>,
    pub w_p: Vec<f64>,
    pub w_0: Vec<f64>,
    pub w_1: Vec<f64>,
    /// Empirical median of w_pᵀx_c² over the task's own draws.
    pub omega: f64,
}

impl SynthTaskSpec {
    /// Propensity of each row of x under this task's assignment model.
    pub fn propensity_of(&self, x: &Mat) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let v = self.squared_form(x, i);
                assignment_probability(v, self.omega)
            })
            .collect()
    }

    /// Noiseless control-arm mean w_0ᵀ[x_c, x_o] of each row of x.
    pub fn control_mean_of(&self, x: &Mat) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let mut mu0 = 0.0;
                for (k, &j) in self.idx_confounder.iter().enumerate() {
                    mu0 += self.w_0[k] * x.get(i, j);
                }
                for (k, &j) in self.idx_outcome.iter().enumerate() {
                    mu0 += self.w_0[5 + k] * x.get(i, j);
                }
                mu0
            })
            .collect()
    }

    /// Noiseless treatment effect w_1ᵀx_τ of each row of x.
    pub fn cate_of(&self, x: &Mat) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                self.idx_effect
                    .iter()
                    .zip(&self.w_1)
                    .map(|(&j, w)| w * x.get(i, j))
                    .sum()
            })
            .collect()
    }

    /// Re-run the full generation from the stored seed, returning the task
    /// and the per-instance propensities.
    pub fn regenerate(&self) -> Result<(TaskData, Vec<f64>)> {
        let (task, spec, pi) = synth_raw(self.seed, self.n)?;
        if &spec != self {
            return Err(Error::Validation {
                path: format!("synth spec (seed {})", self.seed),
                detail: "stored spec does not match regeneration".into(),
            });
        }
        Ok((task, pi))
    }

    fn squared_form(&self, x: &Mat, i: usize) -> f64 {
        self.idx_confounder
            .iter()
            .zip(&self.w_p)
            .map(|(&j, w)| {
                let v = x.get(i, j);
                w * v * v
            })
            .sum()
    }
}

/// Assignment probability sigmoid(3(v−ω)). The logit is clamped at ±30 so
/// the computed probability stays strictly inside (0,1) in floating point
/// (the unclamped value would round to exactly 0 or 1 past ~±37); the clamp
/// changes any probability by less than 1e-13.
fn assignment_probability(v: f64, omega: f64) -> f64 {
    let logit = (3.0 * (v - omega)).clamp(-30.0, 30.0);
    1.0 / (1.0 + (-logit).exp())
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn synth_raw(seed: u64, n: usize) -> Result<(TaskData, SynthTaskSpec, Vec<f64>)> {
    if n < 50 {
        return Err(Error::Parameter {
            name: "n",
            detail: format!("synthetic tasks need at least 50 instances, got {n}"),
        });
    }
    let normal = StandardNormal;
    let mut rng_x = rng_for(seed, "synth-x", 0);
    let x = Mat::from_fn(n, SYNTH_DIM, |_, _| normal.sample(&mut rng_x));

    let mut rng_w = rng_for(seed, "synth-w", 0);
    let mut indices: Vec<usize> = (0..SYNTH_DIM).collect();
    indices.shuffle(&mut rng_w);
    let idx_confounder = indices[0..5].to_vec();
    let idx_outcome = indices[5..10].to_vec();
    let idx_effect = indices[10..15].to_vec();
    let w_p: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng_w)).collect();
    let w_0: Vec<f64> = (0..10).map(|_| normal.sample(&mut rng_w)).collect();
    let w_1: Vec<f64> = (0..5).map(|_| normal.sample(&mut rng_w)).collect();

    let mut spec = SynthTaskSpec {
        seed,
        n,
        idx_confounder,
        idx_outcome,
        idx_effect,
        w_p,
        w_0,
        w_1,
        omega: 0.0,
    };
    let squared: Vec<f64> = (0..n).map(|i| spec.squared_form(&x, i)).collect();
    spec.omega = median(&squared);
    let pi: Vec<f64> = squared
        .iter()
        .map(|&v| assignment_probability(v, spec.omega))
        .collect();

    let mut rng_a = rng_for(seed, "synth-a", 0);
    let a: Vec<u8> = pi.iter().map(|&p| u8::from(rng_a.gen::<f64>() < p)).collect();

    // The stored effect is the same w_1ᵀx_τ sum `cate_of` recomputes, so
    // an oracle that reads the sidecar reproduces it bitwise.
    let mu: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let mut mu0 = 0.0;
            for (k, &j) in spec.idx_confounder.iter().enumerate() {
                mu0 += spec.w_0[k] * x.get(i, j);
            }
            for (k, &j) in spec.idx_outcome.iter().enumerate() {
                mu0 += spec.w_0[5 + k] * x.get(i, j);
            }
            let tau: f64 = spec
                .idx_effect
                .iter()
                .zip(&spec.w_1)
                .map(|(&j, w)| w * x.get(i, j))
                .sum();
            (mu0, tau)
        })
        .collect();

    let mut rng_noise = rng_for(seed, "synth-noise", 0);
    let mut y = Vec::with_capacity(n);
    let mut true_cate = Vec::with_capacity(n);
    for (i, &(mu0, tau)) in mu.iter().enumerate() {
        let e0: f64 = normal.sample(&mut rng_noise);
        let e1: f64 = normal.sample(&mut rng_noise);
        let y0 = mu0 + e0;
        let y1 = mu0 + tau + e1;
        y.push(if a[i] == 1 { y1 } else { y0 });
        true_cate.push(tau);
    }

    let task = TaskData {
        id: format!("synth-{seed:016x}"),
        x,
        y,
        a,
        true_cate: Some(true_cate),
        pseudo_cate: None,
    };
    task.validate(&format!("synth seed {seed}")).map_err(|e| match e {
        Error::Validation { detail, .. } => Error::Sampling(format!(
            "degenerate synthetic draw for seed {seed}: {detail}"
        )),
        other => other,
    })?;
    Ok((task, spec, pi))
}

/// Generate one synthetic task. Deterministic in the seed.
pub fn generate_synth_task(seed: u64, n: usize) -> Result<(TaskData, SynthTaskSpec)> {
    let (task, spec, _) = synth_raw(seed, n)?;
    Ok((task, spec))
}

/// Manifest entry for one task file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestTask {
    pub id: String,
    pub file: String,
    pub spec_file: Option<String>,
    pub seed: u64,
}

/// Suite manifest listing every task file and the seeds that made them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format_version: u32,
    pub root_seed: u64,
    pub n_tasks: usize,
    pub n_per_task: usize,
    pub dim: usize,
    pub tasks: Vec<ManifestTask>,
}

/// Generate a task suite under `dir` (tasks/*.csv + sidecars + manifest).
pub fn generate_synth_suite(
    dir: &Path,
    n_tasks: usize,
    n_per_task: usize,
    seed: u64,
) -> Result<SuiteManifest> {
    if n_tasks < 3 {
        return Err(Error::Parameter {
            name: "n_tasks",
            detail: format!("a suite needs at least 3 tasks, got {n_tasks}"),
        });
    }
    let tasks_dir = dir.join("tasks");
    fs::create_dir_all(&tasks_dir).map_err(|e| Error::io(tasks_dir.display().to_string(), e))?;
    let width = (n_tasks.max(10) - 1).to_string().len();
    let mut entries = Vec::with_capacity(n_tasks);
    for t in 0..n_tasks {
        let task_seed = derive_seed(seed, "synth-task", t as u64);
        let (mut task, spec) = generate_synth_task(task_seed, n_per_task)?;
        task.id = format!("task_{t:0width$}");
        let file = format!("tasks/{}.csv", task.id);
        let spec_file = format!("tasks/{}.synth.json", task.id);
        save_task(&task, &dir.join(&file))?;
        write_json(&dir.join(&spec_file), &spec)?;
        entries.push(ManifestTask {
            id: task.id.clone(),
            file,
            spec_file: Some(spec_file),
            seed: task_seed,
        });
    }
    let manifest = SuiteManifest {
        format_version: 1,
        root_seed: seed,
        n_tasks,
        n_per_task,
        dim: SYNTH_DIM,
        tasks: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Serialize a value as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(body.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&body).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        detail: e.to_string(),
    })
}

/// Write a task as CSV with header x_0..x_{d−1},y,a[,true_cate][,pseudo_cate].
/// Floats are written in shortest round-trip form, so save/load is lossless
/// and byte-stable.
pub fn save_task(task: &TaskData, path: &Path) -> Result<()> {
    task.validate(&path.display().to_string())?;
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::Validation {
            path: path.display().to_string(),
            detail: format!("csv write failed: {other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let d = task.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x_{j}")).collect();
    header.push("y".into());
    header.push("a".into());
    if task.true_cate.is_some() {
        header.push("true_cate".into());
    }
    if task.pseudo_cate.is_some() {
        header.push("pseudo_cate".into());
    }
    w.write_record(&header).map_err(io_err)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..task.len() {
        record.clear();
        for j in 0..d {
            record.push(format!("{}", task.x.get(i, j)));
        }
        record.push(format!("{}", task.y[i]));
        record.push(format!("{}", task.a[i]));
        if let Some(tc) = &task.true_cate {
            record.push(format!("{}", tc[i]));
        }
        if let Some(pc) = &task.pseudo_cate {
            record.push(format!("{}", pc[i]));
        }
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a task CSV, enforcing the schema and task invariants.
pub fn load_task(path: &Path) -> Result<TaskData> {
    let display = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(display.clone(), io),
            other => Error::Parse {
                path: display.clone(),
                line: 0,
                detail: format!("{other:?}"),
            },
        })?;
    let headers = r
        .headers()
        .map_err(|e| Error::Parse {
            path: display.clone(),
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let mut x_cols = Vec::new();
    loop {
        let name = format!("x_{}", x_cols.len());
        match headers.iter().position(|h| h == name) {
            Some(idx) => x_cols.push(idx),
            None => break,
        }
    }
    let d = x_cols.len();
    if d == 0 {
        return Err(Error::Parse {
            path: display,
            line: 1,
            detail: "no feature columns x_0.. found".into(),
        });
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let y_col = col("y").ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        detail: "missing outcome column y".into(),
    })?;
    let a_col = col("a").ok_or_else(|| Error::Parse {
        path: display.clone(),
        line: 1,
        detail: "missing treatment column a".into(),
    })?;
    let tc_col = col("true_cate");
    let pc_col = col("pseudo_cate");

    let mut xs: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut true_cate = Vec::new();
    let mut pseudo_cate = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::Parse {
            path: display.clone(),
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).ok_or_else(|| Error::Parse {
                path: display.clone(),
                line,
                detail: format!("missing field {idx}"),
            })?;
            raw.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: display.clone(),
                line,
                detail: format!("not a number: {raw:?}"),
            })
        };
        for &idx in &x_cols {
            xs.push(field(idx)?);
        }
        y.push(field(y_col)?);
        let a_raw = field(a_col)?;
        if a_raw != 0.0 && a_raw != 1.0 {
            return Err(Error::Validation {
                path: display.clone(),
                detail: format!("treatment value {a_raw} at line {line} is not in {{0,1}}"),
            });
        }
        a.push(a_raw as u8);
        if let Some(idx) = tc_col {
            true_cate.push(field(idx)?);
        }
        if let Some(idx) = pc_col {
            pseudo_cate.push(field(idx)?);
        }
    }
    let n = y.len();
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "task".into());
    let task = TaskData {
        id: stem,
        x: Mat::from_vec(n, d, xs),
        y,
        a,
        true_cate: tc_col.map(|_| true_cate),
        pseudo_cate: pc_col.map(|_| pseudo_cate),
    };
    task.validate(&display)?;
    Ok(task)
}

/// Load a suite: manifest plus every task, in manifest order.
pub fn load_suite(dir: &Path) -> Result<(SuiteManifest, Vec<TaskData>)> {
    let manifest: SuiteManifest = read_json(&dir.join("manifest.json"))?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let mut task = load_task(&dir.join(&entry.file))?;
        task.id = entry.id.clone();
        tasks.push(task);
    }
    Ok((manifest, tasks))
}

/// Path of a task's synthetic-spec sidecar, if listed.
pub fn spec_path(dir: &Path, entry: &ManifestTask) -> Option<PathBuf> {
    entry.spec_file.as_ref().map(|f| dir.join(f))
}

/// Random disjoint partition of 0..n into (train, val, test) index sets.
/// Validation and test sizes round down (at least 1 each); the remainder
/// goes to train. Deterministic in the seed; each returned set is sorted.
pub fn split_indices(
    n: usize,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (f_train, f_val, f_test) = fractions;
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 || f_train <= 0.0 || f_val <= 0.0 || f_test <= 0.0 {
        return Err(Error::Split(format!(
            "fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n_val = ((f_val * n as f64).floor() as usize).max(1);
    let n_test = ((f_test * n as f64).floor() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::Split(format!(
            "{n} tasks cannot fill splits of {n_val} validation and {n_test} test"
        )));
    }
    let n_train = n - n_val - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let mut train = order[0..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}
