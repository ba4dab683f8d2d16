//! Episode sampling, the CATE loss, the meta-training loop with early
//! stopping, and support-based evaluation.
//!
//! Meta-training repeats: sample a batch of tasks (with replacement), one
//! episode each; adapt the shared parameters to every support set on one
//! tape; score predictions on the query sets; take one Adam step on the
//! batch-mean loss. Validation episodes are frozen at startup so early
//! stopping compares like with like, and the best validation snapshot is
//! returned.
//!
//! Two outer objectives are supported: the CATE loss (squared error of
//! effect predictions against pre-computed query pseudo-CATE labels) and
//! an ablation objective that scores the adapted nuisance heads directly
//! on query treatments and outcomes.

use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::eval::pehe;
use crate::mat::Mat;
use crate::metalearner::{
    adapt, dr_pseudo_nodes, predict_cate, LearnerKind, Support, DEFAULT_PI_CLIP,
};
use crate::nn::{bind_shared, encode, init_shared, Adam, BoundShared, HeadMode, SharedParams};
use crate::seeds::rng_for;
use crate::tape::{NodeId, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

/// One sampled episode: a stratified support set and a disjoint query set
/// from the same task. Query outcomes and treatments are kept for the
/// ablation objective; pseudo and true effect columns ride along when the
/// task has them.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task_id: String,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
    pub support_x: Mat,
    pub support_y: Vec<f64>,
    pub support_a: Vec<u8>,
    pub query_x: Mat,
    pub query_y: Vec<f64>,
    pub query_a: Vec<u8>,
    pub query_pseudo: Option<Vec<f64>>,
    pub query_true: Option<Vec<f64>>,
}

impl Episode {
    pub fn support(&self) -> Support<'_> {
        Support {
            x: &self.support_x,
            y: &self.support_y,
            a: &self.support_a,
        }
    }

    pub fn n_support(&self) -> usize {
        self.support_y.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_y.len()
    }
}

fn gather_rows(x: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j))
}

fn gather<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Draw per-arm row subsets without replacement: `n_s` support and `n_q`
/// query instances per arm, disjoint within the task.
pub fn sample_episode(
    task: &TaskData,
    n_s: (usize, usize),
    n_q: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut support_rows = Vec::with_capacity(n_s.0 + n_s.1);
    let mut query_rows = Vec::with_capacity(n_q.0 + n_q.1);
    for arm in [0u8, 1u8] {
        let (need_s, need_q) = if arm == 0 {
            (n_s.0, n_q.0)
        } else {
            (n_s.1, n_q.1)
        };
        if need_s < 1 {
            return Err(Error::Parameter {
                name: "n_support",
                detail: format!("support arm {arm} count must be at least 1"),
            });
        }
        let mut pool = task.arm_indices(arm);
        if pool.len() < need_s + need_q {
            return Err(Error::Sampling(format!(
                "task {}: arm {arm} has {} instances, episode needs {} support + {} query",
                task.id,
                pool.len(),
                need_s,
                need_q
            )));
        }
        pool.shuffle(rng);
        support_rows.extend_from_slice(&pool[..need_s]);
        query_rows.extend_from_slice(&pool[need_s..need_s + need_q]);
    }
    support_rows.sort_unstable();
    query_rows.sort_unstable();
    Ok(Episode {
        task_id: task.id.clone(),
        support_x: gather_rows(&task.x, &support_rows),
        support_y: gather(&task.y, &support_rows),
        support_a: gather(&task.a, &support_rows),
        query_x: gather_rows(&task.x, &query_rows),
        query_y: gather(&task.y, &query_rows),
        query_a: gather(&task.a, &query_rows),
        query_pseudo: task.pseudo_cate.as_ref().map(|c| gather(c, &query_rows)),
        query_true: task.true_cate.as_ref().map(|c| gather(c, &query_rows)),
        support_rows,
        query_rows,
    })
}

/// Episode CATE loss: the sum of squared residuals Σ(label − prediction)².
pub fn cate_loss(tape: &mut Tape, tau_hat: NodeId, labels: &[f64]) -> Result<NodeId> {
    if tape.value(tau_hat).shape() != (labels.len(), 1) {
        return Err(Error::Shape {
            op: "cate_loss",
            detail: format!(
                "predictions {:?} vs {} labels",
                tape.value(tau_hat).shape(),
                labels.len()
            ),
        });
    }
    let target = tape.constant(Mat::col_vec(labels))?;
    let resid = tape.sub(tau_hat, target)?;
    let sq = tape.square(resid)?;
    tape.sum(sq)
}

/// Mean of an n×1 column node (scalar node).
fn mean_node(tape: &mut Tape, column: NodeId) -> Result<NodeId> {
    let n = tape.value(column).rows();
    if n == 0 {
        return Err(Error::Shape {
            op: "mean",
            detail: "mean of an empty column".into(),
        });
    }
    let total = tape.sum(column)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Ablation objective: score the adapted nuisance models on the query set.
///
/// Sum of three equally weighted components, each a per-instance mean:
/// negative log-likelihood of the propensity head on query treatments,
/// squared error of each arm's outcome head on that arm's query outcomes,
/// and squared error of the effect head against query doubly-robust
/// pseudo-outcomes built from the adapted models.
pub fn subproblem_loss(
    tape: &mut Tape,
    episode: &Episode,
    bound: &BoundShared,
    head_mode: HeadMode,
    pi_clip: f64,
) -> Result<NodeId> {
    let adaptation = adapt(
        tape,
        LearnerKind::Dr,
        episode.support(),
        bound,
        head_mode,
        pi_clip,
    )?;
    let m = episode.n_query();
    for arm in [0u8, 1u8] {
        if !episode.query_a.iter().any(|&a| a == arm) {
            return Err(Error::Episode(format!(
                "task {}: query arm {arm} is empty; the ablation objective needs both arms",
                episode.task_id
            )));
        }
    }

    let xq = tape.constant(episode.query_x.clone())?;

    // Propensity negative log-likelihood on query treatments.
    let z_p = encode(tape, &bound.enc_p, xq)?;
    let protos = adaptation.prototypes.as_ref().expect("DR adaptation");
    let pi_raw = crate::heads::propensity(tape, z_p, protos)?;
    let pi = tape.clamp(pi_raw, pi_clip, 1.0 - pi_clip)?;
    let a_f: Vec<f64> = episode.query_a.iter().map(|&v| f64::from(v)).collect();
    let not_a: Vec<f64> = a_f.iter().map(|v| 1.0 - v).collect();
    let a_node = tape.constant(Mat::col_vec(&a_f))?;
    let not_a_node = tape.constant(Mat::col_vec(&not_a))?;
    let log_pi = tape.log(pi)?;
    let neg_pi = tape.scale(pi, -1.0)?;
    let one_minus_pi = tape.offset(neg_pi, 1.0)?;
    let log_1m_pi = tape.log(one_minus_pi)?;
    let picked1 = tape.mul(a_node, log_pi)?;
    let picked0 = tape.mul(not_a_node, log_1m_pi)?;
    let loglik = tape.add(picked1, picked0)?;
    let mean_ll = mean_node(tape, loglik)?;
    let nll = tape.scale(mean_ll, -1.0)?;

    // Per-arm outcome mean squared error on query outcomes.
    let z_mu = encode(tape, &bound.enc_mu, xq)?;
    let mut arm_mses = Vec::with_capacity(2);
    for arm in [0u8, 1u8] {
        let rows: Vec<usize> = (0..m).filter(|&i| episode.query_a[i] == arm).collect();
        let z_arm = tape.select_rows(z_mu, &rows)?;
        let head = if arm == 0 { &adaptation.mu0 } else { &adaptation.mu1 };
        let pred = head.predict(tape, z_arm)?;
        let targets: Vec<f64> = rows.iter().map(|&i| episode.query_y[i]).collect();
        let target_node = tape.constant(Mat::col_vec(&targets))?;
        let resid = tape.sub(pred, target_node)?;
        let sq = tape.square(resid)?;
        arm_mses.push(mean_node(tape, sq)?);
    }

    // Effect head against query doubly-robust pseudo-outcomes. The
    // pseudo-outcome is itself a function of the adapted models, so
    // gradients flow through both sides of the residual.
    let mu0_q = adaptation.mu0.predict(tape, z_mu)?;
    let mu1_q = adaptation.mu1.predict(tape, z_mu)?;
    let ytilde = dr_pseudo_nodes(tape, &episode.query_y, &episode.query_a, pi, mu0_q, mu1_q)?;
    let z_y = encode(tape, &bound.enc_y, xq)?;
    let tau = adaptation.tau.as_ref().expect("DR adaptation");
    let tau_q = tau.predict(tape, z_y)?;
    let resid = tape.sub(tau_q, ytilde)?;
    let sq = tape.square(resid)?;
    let tau_mse = mean_node(tape, sq)?;

    let mut total = tape.add(nll, arm_mses[0])?;
    total = tape.add(total, arm_mses[1])?;
    tape.add(total, tau_mse)
}

/// Which outer loss drives meta-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Squared error of effect predictions against query pseudo-CATE labels.
    CateLoss,
    /// Ablation: score nuisance heads directly on query data.
    SubproblemLoss,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::CateLoss => "cate_loss",
            Objective::SubproblemLoss => "subproblem_loss",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cate_loss" => Ok(Objective::CateLoss),
            "subproblem_loss" => Ok(Objective::SubproblemLoss),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected cate_loss or subproblem_loss)"
            ))),
        }
    }
}

fn default_batch() -> usize {
    32
}
fn default_max_epochs() -> usize {
    5000
}
fn default_val_interval() -> usize {
    10
}
fn default_patience() -> usize {
    50
}
fn default_val_episodes_per_task() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_pi_clip() -> f64 {
    DEFAULT_PI_CLIP
}
fn default_n_support() -> (usize, usize) {
    (3, 3)
}
fn default_n_query() -> (usize, usize) {
    (20, 20)
}

/// Meta-training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: LearnerKind,
    pub head_mode: HeadMode,
    pub objective: Objective,
    /// Per-arm support counts (N^s = sum).
    #[serde(default = "default_n_support")]
    pub n_support: (usize, usize),
    /// Per-arm query counts (N^q = sum).
    #[serde(default = "default_n_query")]
    pub n_query: (usize, usize),
    /// Tasks per meta-update, sampled with replacement.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Validate every this many epochs.
    #[serde(default = "default_val_interval")]
    pub val_interval: usize,
    /// Stop after this many validations without improvement.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_val_episodes_per_task")]
    pub val_episodes_per_task: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_pi_clip")]
    pub pi_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(kind: LearnerKind, head_mode: HeadMode, objective: Objective, seed: u64) -> Self {
        TrainConfig {
            kind,
            head_mode,
            objective,
            n_support: default_n_support(),
            n_query: default_n_query(),
            batch: default_batch(),
            max_epochs: default_max_epochs(),
            val_interval: default_val_interval(),
            patience: default_patience(),
            val_episodes_per_task: default_val_episodes_per_task(),
            lr: default_lr(),
            pi_clip: default_pi_clip(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let checks: [(&'static str, usize); 7] = [
            ("n_support.0", self.n_support.0),
            ("n_support.1", self.n_support.1),
            ("n_query.0", self.n_query.0),
            ("n_query.1", self.n_query.1),
            ("batch", self.batch),
            ("val_interval", self.val_interval),
            ("patience", self.patience),
        ];
        for (name, v) in checks {
            if v < 1 {
                return Err(Error::Parameter {
                    name,
                    detail: format!("must be at least 1, got {v}"),
                });
            }
        }
        if self.val_episodes_per_task < 1 {
            return Err(Error::Parameter {
                name: "val_episodes_per_task",
                detail: "must be at least 1".into(),
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
}

/// One training-log line. `train_loss` is absent on the initial
/// validation-only record; `val_loss` is present on validation epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

/// Per-episode loss node under the configured objective.
fn episode_loss_node(
    tape: &mut Tape,
    episode: &Episode,
    bound: &BoundShared,
    config: &TrainConfig,
) -> Result<NodeId> {
    match config.objective {
        Objective::CateLoss => {
            let labels = episode.query_pseudo.as_ref().ok_or_else(|| {
                Error::Episode(format!(
                    "task {}: no pseudo-CATE labels; run labeling first",
                    episode.task_id
                ))
            })?;
            let adaptation = adapt(
                tape,
                config.kind,
                episode.support(),
                bound,
                config.head_mode,
                config.pi_clip,
            )?;
            let tau_hat = predict_cate(tape, &adaptation, &episode.query_x, bound)?;
            cate_loss(tape, tau_hat, labels)
        }
        Objective::SubproblemLoss => {
            subproblem_loss(tape, episode, bound, config.head_mode, config.pi_clip)
        }
    }
}

/// One meta-update on a batch of episodes: batch-mean loss, backward,
/// Adam step. Returns the batch loss value.
fn batch_step(
    shared: &mut SharedParams,
    adam: &mut Adam,
    episodes: &[Episode],
    config: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::with_capacity(episodes.len() * 256);
    let bound = bind_shared(&mut tape, shared)?;
    let mut total: Option<NodeId> = None;
    for episode in episodes {
        let loss = episode_loss_node(&mut tape, episode, &bound, config)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Episode("empty batch".into()))?;
    let batch_loss = tape.scale(total, 1.0 / episodes.len() as f64)?;
    let value = tape.value(batch_loss).get(0, 0);
    let grads = tape.backward(batch_loss)?;
    let named = bound.named_grads(&grads);
    adam.step(shared, &named)?;
    Ok(value)
}

/// Loss value of one episode under a parameter snapshot (no update).
fn episode_loss_value(
    shared: &SharedParams,
    episode: &Episode,
    config: &TrainConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = bind_shared(&mut tape, shared)?;
    let loss = episode_loss_node(&mut tape, episode, &bound, config)?;
    Ok(tape.value(loss).get(0, 0))
}

fn validation_loss(
    shared: &SharedParams,
    episodes: &[Episode],
    config: &TrainConfig,
) -> Result<f64> {
    let total: f64 = episodes
        .par_iter()
        .map(|e| episode_loss_value(shared, e, config))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(total / episodes.len() as f64)
}

/// Meta-train shared parameters on a pool of labeled tasks.
///
/// Returns the best-validation snapshot and the per-epoch training log.
/// Deterministic in `(tasks, config)`.
pub fn meta_train(
    train_tasks: &[TaskData],
    val_tasks: &[TaskData],
    config: &TrainConfig,
) -> Result<(SharedParams, Vec<LogRecord>)> {
    config.validate()?;
    if train_tasks.is_empty() || val_tasks.is_empty() {
        return Err(Error::Episode(format!(
            "meta-training needs non-empty pools: {} train, {} validation tasks",
            train_tasks.len(),
            val_tasks.len()
        )));
    }
    let d = train_tasks[0].dim();
    for task in train_tasks.iter().chain(val_tasks) {
        if task.dim() != d {
            return Err(Error::Shape {
                op: "meta_train",
                detail: format!("task {} has dim {}, expected {d}", task.id, task.dim()),
            });
        }
    }

    // Frozen validation episodes, one RNG stream per (task, slot).
    let mut val_episodes = Vec::with_capacity(val_tasks.len() * config.val_episodes_per_task);
    for (t, task) in val_tasks.iter().enumerate() {
        for k in 0..config.val_episodes_per_task {
            let idx = (t * config.val_episodes_per_task + k) as u64;
            let mut rng = rng_for(config.seed, "val-episode", idx);
            val_episodes.push(sample_episode(task, config.n_support, config.n_query, &mut rng)?);
        }
    }

    let mut shared = init_shared(config.seed, d, config.head_mode)?;
    let mut adam = Adam::new(config.lr);
    let start = Instant::now();
    let mut log = Vec::new();

    let init_val = validation_loss(&shared, &val_episodes, config)?;
    let mut best_val = init_val;
    let mut best = shared.clone();
    let mut stale = 0usize;
    log.push(LogRecord {
        epoch: 0,
        train_loss: None,
        val_loss: Some(init_val),
        wall_ms: start.elapsed().as_millis() as u64,
    });

    for epoch in 1..=config.max_epochs {
        let mut rng = rng_for(config.seed, "epoch", epoch as u64);
        let mut episodes = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let t = rng.gen_range(0..train_tasks.len());
            episodes.push(sample_episode(
                &train_tasks[t],
                config.n_support,
                config.n_query,
                &mut rng,
            )?);
        }
        let train_loss = batch_step(&mut shared, &mut adam, &episodes, config)?;

        let mut val_loss = None;
        if epoch % config.val_interval == 0 {
            let v = validation_loss(&shared, &val_episodes, config)?;
            val_loss = Some(v);
            if v < best_val {
                best_val = v;
                best = shared.clone();
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log.push(LogRecord {
            epoch,
            train_loss: Some(train_loss),
            val_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        if stale >= config.patience {
            break;
        }
    }
    Ok((best, log))
}

/// Anything that maps (support set, query features) to CATE estimates.
pub trait CatePredictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, support: Support<'_>, x_query: &Mat) -> Result<Vec<f64>>;
}

/// Meta-learned predictor: adapt the shared snapshot to the support, then
/// predict. Runs on a throwaway tape per call.
pub struct MetaPredictor<'a> {
    pub shared: &'a SharedParams,
    pub kind: LearnerKind,
    pub head_mode: HeadMode,
    pub pi_clip: f64,
}

impl CatePredictor for MetaPredictor<'_> {
    fn name(&self) -> String {
        format!("meta_{}_{}", self.kind, match self.head_mode {
            HeadMode::Linear => "linear",
            HeadMode::Gp => "gp",
        })
    }

    fn predict(&self, support: Support<'_>, x_query: &Mat) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = bind_shared(&mut tape, self.shared)?;
        let adaptation = adapt(
            &mut tape,
            self.kind,
            support,
            &bound,
            self.head_mode,
            self.pi_clip,
        )?;
        let pred = predict_cate(&mut tape, &adaptation, x_query, &bound)?;
        Ok(tape.value(pred).data().to_vec())
    }
}

/// Evaluation configuration: support size per arm, repeats per task, and
/// the seed that fixes the support draws.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_support: (usize, usize),
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_support: (3, 3),
            n_repeats: 30,
            seed: 0,
        }
    }
}

/// One scored evaluation episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub task_id: String,
    pub repeat: usize,
    pub pehe: f64,
    pub n_query: usize,
}

/// Evaluation result: every episode score plus the mean and its standard
/// error across episodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub method: String,
    pub scores: Vec<EpisodeScore>,
    pub mean: f64,
    pub se: f64,
}

/// Mean and standard error (sd/√count) of a sample.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Draw a support set per arm; everything else in the task is the query.
fn sample_eval_support(
    task: &TaskData,
    n_s: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut support_rows = Vec::with_capacity(n_s.0 + n_s.1);
    for arm in [0u8, 1u8] {
        let need = if arm == 0 { n_s.0 } else { n_s.1 };
        let mut pool = task.arm_indices(arm);
        if pool.len() < need + 1 {
            return Err(Error::Sampling(format!(
                "task {}: arm {arm} has {} instances, evaluation needs {} support plus a query remainder",
                task.id,
                pool.len(),
                need
            )));
        }
        pool.shuffle(rng);
        support_rows.extend_from_slice(&pool[..need]);
    }
    support_rows.sort_unstable();
    let mut in_support = vec![false; task.len()];
    for &i in &support_rows {
        in_support[i] = true;
    }
    let rest: Vec<usize> = (0..task.len()).filter(|&i| !in_support[i]).collect();
    Ok((support_rows, rest))
}

/// Evaluate a predictor on meta-test tasks: per task and repeat, draw a
/// support set, predict the CATE of every remaining instance, and score
/// against the true effects. Support draws depend only on (seed, task
/// index, repeat), so different predictors under one config are paired.
pub fn evaluate(
    tasks: &[TaskData],
    predictor: &dyn CatePredictor,
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    if tasks.is_empty() || config.n_repeats == 0 {
        return Err(Error::Evaluation(format!(
            "evaluation needs tasks and repeats, got {} tasks x {} repeats",
            tasks.len(),
            config.n_repeats
        )));
    }
    for task in tasks {
        if task.true_cate.is_none() {
            return Err(Error::Evaluation(format!(
                "task {} has no true-effect column; cannot score",
                task.id
            )));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..config.n_repeats).map(move |r| (t, r)))
        .collect();
    let mut scores = jobs
        .par_iter()
        .map(|&(t, r)| -> Result<EpisodeScore> {
            let task = &tasks[t];
            let idx = (t * config.n_repeats + r) as u64;
            let mut rng = rng_for(config.seed, "eval-episode", idx);
            let (support_rows, rest) = sample_eval_support(task, config.n_support, &mut rng)?;
            let sx = gather_rows(&task.x, &support_rows);
            let sy = gather(&task.y, &support_rows);
            let sa = gather(&task.a, &support_rows);
            let support = Support {
                x: &sx,
                y: &sy,
                a: &sa,
            };
            let qx = gather_rows(&task.x, &rest);
            let estimated = predictor.predict(support, &qx)?;
            let truth = gather(task.true_cate.as_ref().expect("checked"), &rest);
            Ok(EpisodeScore {
                task_id: task.id.clone(),
                repeat: r,
                pehe: pehe(&truth, &estimated)?,
                n_query: rest.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| (&a.task_id, a.repeat).cmp(&(&b.task_id, b.repeat)));
    let values: Vec<f64> = scores.iter().map(|s| s.pehe).collect();
    let (mean, se) = mean_and_se(&values);
    Ok(EvalOutcome {
        method: predictor.name(),
        scores,
        mean,
        se,
    })
}

/// Saved training artifact: the learned parameters plus everything needed
/// to rebuild the evaluation context.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_dim: usize,
    pub kind: LearnerKind,
    pub head_mode: HeadMode,
    pub objective: Objective,
    pub pi_clip: f64,
    pub root_seed: u64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub shared: SharedParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = crate::data::read_json(path)?;
        if ckpt.shared.input_dim() != ckpt.input_dim {
            return Err(Error::Validation {
                path: path.display().to_string(),
                detail: format!(
                    "checkpoint says input_dim {}, parameters have {}",
                    ckpt.input_dim,
                    ckpt.shared.input_dim()
                ),
            });
        }
        Ok(ckpt)
    }
}
