//! Per-episode CATE estimator assembly for the three learner variants.
//!
//! Given a support set and the shared parameters bound on a tape, `adapt`
//! runs the closed-form adaptation: encode the support, fit per-arm
//! outcome heads, and — depending on the variant — estimate propensities
//! from class prototypes, build pseudo-outcomes, and fit an effect head
//! on them. `predict_cate` then maps query features to effect estimates.
//! Every step is recorded on the tape, so a loss downstream of
//! `predict_cate` differentiates through the whole construction.
//!
//! Variants: `Dr` uses doubly-robust pseudo-outcomes (propensity and
//! outcome models), `Ra` uses regression-adjusted pseudo-outcomes
//! (outcome models only), and `Plugin` predicts the difference of the two
//! outcome heads directly.

use crate::error::{Error, Result};
use crate::heads::{
    gp_fit, gp_predict, prototype_means, propensity, ridge_fit, ridge_predict, GpHead,
    Prototypes, RidgeHead,
};
use crate::mat::Mat;
use crate::nn::{encode, BoundGpKernel, BoundShared, HeadMode};
use crate::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which pseudo-outcome construction the learner uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    /// Doubly-robust: inverse-propensity-weighted residuals plus outcome
    /// model correction.
    Dr,
    /// Regression-adjusted: outcome-model residuals only.
    Ra,
    /// Plain difference of the two outcome models; no effect head.
    Plugin,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Dr => "dr",
            LearnerKind::Ra => "ra",
            LearnerKind::Plugin => "plugin",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dr" => Ok(LearnerKind::Dr),
            "ra" => Ok(LearnerKind::Ra),
            "plugin" => Ok(LearnerKind::Plugin),
            other => Err(Error::Config(format!(
                "unknown learner kind {other:?} (expected dr, ra, or plugin)"
            ))),
        }
    }
}

/// Default propensity clip: estimates enter the pseudo-outcome weights
/// through [clip, 1−clip].
pub const DEFAULT_PI_CLIP: f64 = 1e-3;

/// Doubly-robust pseudo-outcome for one instance.
///
/// ỹ = (a/π − (1−a)/(1−π))·y + (1 − a/π)·μ₁ − (1 − (1−a)/(1−π))·μ₀.
/// Its mean over the assignment and outcome noise equals μ₁−μ₀ whenever
/// either the propensity or the outcome models are correct.
pub fn dr_pseudo_outcome(y: f64, a: u8, pi: f64, mu0: f64, mu1: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::Parameter {
            name: "pi",
            detail: format!("propensity {pi} outside (0,1)"),
        });
    }
    let a = f64::from(a);
    let w1 = a / pi;
    let w0 = (1.0 - a) / (1.0 - pi);
    Ok((w1 - w0) * y + (1.0 - w1) * mu1 - (1.0 - w0) * mu0)
}

/// Regression-adjusted pseudo-outcome: a·(y−μ₀) + (1−a)·(μ₁−y).
pub fn ra_pseudo_outcome(y: f64, a: u8, mu0: f64, mu1: f64) -> f64 {
    let a = f64::from(a);
    a * (y - mu0) + (1.0 - a) * (mu1 - y)
}

/// Borrowed view of an episode's support half.
#[derive(Clone, Copy, Debug)]
pub struct Support<'a> {
    pub x: &'a Mat,
    pub y: &'a [f64],
    pub a: &'a [u8],
}

impl<'a> Support<'a> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.rows() != n || self.a.len() != n {
            return Err(Error::Shape {
                op: "adapt",
                detail: format!(
                    "support with {} feature rows, {} outcomes, {} treatments",
                    self.x.rows(),
                    n,
                    self.a.len()
                ),
            });
        }
        for arm in [0u8, 1u8] {
            if !self.a.iter().any(|&v| v == arm) {
                return Err(Error::Episode(format!(
                    "support arm {arm} is empty ({n} instances, all in arm {})",
                    1 - arm
                )));
            }
        }
        Ok(())
    }
}

/// A fitted closed-form head of either mode.
#[derive(Clone, Debug)]
pub enum FittedHead {
    Ridge(RidgeHead),
    Gp(GpHead),
}

impl FittedHead {
    /// Predict targets at query encodings.
    pub fn predict(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        match self {
            FittedHead::Ridge(head) => ridge_predict(tape, head, z),
            FittedHead::Gp(head) => gp_predict(tape, head, z),
        }
    }
}

/// Everything `adapt` fit for one episode, all living on the tape.
#[derive(Clone, Debug)]
pub struct EpisodeAdaptation {
    pub kind: LearnerKind,
    pub head_mode: HeadMode,
    /// Class prototypes in propensity-encoder space (DR only).
    pub prototypes: Option<Prototypes>,
    /// Clipped propensity estimates on the support (DR only), n×1.
    pub propensity_support: Option<NodeId>,
    pub mu0: FittedHead,
    pub mu1: FittedHead,
    /// Outcome-head predictions on every support row, n×1 each.
    pub mu0_support: NodeId,
    pub mu1_support: NodeId,
    /// Effect head fitted on pseudo-outcomes (DR and RA).
    pub tau: Option<FittedHead>,
    /// Support pseudo-outcomes ỹ^s (DR and RA), n×1.
    pub pseudo_outcomes: Option<NodeId>,
    /// Propensity clip used for this adaptation.
    pub pi_clip: f64,
}

/// Vectorized doubly-robust pseudo-outcomes on the tape. `y` and `a` are
/// data (constants); `pi`, `mu0`, `mu1` are n×1 nodes, so gradients flow
/// into the propensity and outcome models.
pub fn dr_pseudo_nodes(
    tape: &mut Tape,
    y: &[f64],
    a: &[u8],
    pi: NodeId,
    mu0: NodeId,
    mu1: NodeId,
) -> Result<NodeId> {
    let n = y.len();
    for (name, node) in [("pi", pi), ("mu0", mu0), ("mu1", mu1)] {
        if tape.value(node).shape() != (n, 1) {
            return Err(Error::Shape {
                op: "dr_pseudo_nodes",
                detail: format!("{name} is {:?}, expected ({n}, 1)", tape.value(node).shape()),
            });
        }
    }
    let a_f: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    let a_node = tape.constant(Mat::col_vec(&a_f))?;
    let not_a: Vec<f64> = a_f.iter().map(|v| 1.0 - v).collect();
    let not_a_node = tape.constant(Mat::col_vec(&not_a))?;
    let y_node = tape.constant(Mat::col_vec(y))?;

    // w1 = a/π, w0 = (1−a)/(1−π)
    let w1 = tape.div(a_node, pi)?;
    let neg_pi = tape.scale(pi, -1.0)?;
    let one_minus_pi = tape.offset(neg_pi, 1.0)?;
    let w0 = tape.div(not_a_node, one_minus_pi)?;

    let w_diff = tape.sub(w1, w0)?;
    let term_y = tape.mul(w_diff, y_node)?;
    let neg_w1 = tape.scale(w1, -1.0)?;
    let one_minus_w1 = tape.offset(neg_w1, 1.0)?;
    let term_mu1 = tape.mul(one_minus_w1, mu1)?;
    let neg_w0 = tape.scale(w0, -1.0)?;
    let one_minus_w0 = tape.offset(neg_w0, 1.0)?;
    let term_mu0 = tape.mul(one_minus_w0, mu0)?;

    let partial = tape.add(term_y, term_mu1)?;
    tape.sub(partial, term_mu0)
}

/// Vectorized regression-adjusted pseudo-outcomes on the tape.
pub fn ra_pseudo_nodes(
    tape: &mut Tape,
    y: &[f64],
    a: &[u8],
    mu0: NodeId,
    mu1: NodeId,
) -> Result<NodeId> {
    let n = y.len();
    for (name, node) in [("mu0", mu0), ("mu1", mu1)] {
        if tape.value(node).shape() != (n, 1) {
            return Err(Error::Shape {
                op: "ra_pseudo_nodes",
                detail: format!("{name} is {:?}, expected ({n}, 1)", tape.value(node).shape()),
            });
        }
    }
    let a_f: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
    let a_node = tape.constant(Mat::col_vec(&a_f))?;
    let not_a: Vec<f64> = a_f.iter().map(|v| 1.0 - v).collect();
    let not_a_node = tape.constant(Mat::col_vec(&not_a))?;
    let y_node = tape.constant(Mat::col_vec(y))?;

    let resid1 = tape.sub(y_node, mu0)?;
    let treated = tape.mul(a_node, resid1)?;
    let resid0 = tape.sub(mu1, y_node)?;
    let control = tape.mul(not_a_node, resid0)?;
    tape.add(treated, control)
}

/// Fit one outcome head on the rows of one arm and return (head,
/// predictions on all support rows).
fn fit_arm_head(
    tape: &mut Tape,
    z_all: NodeId,
    y: &[f64],
    rows: &[usize],
    mode: HeadMode,
    log_lambda: NodeId,
    gp_kernel: Option<&BoundGpKernel>,
) -> Result<(FittedHead, NodeId)> {
    let z_arm = tape.select_rows(z_all, rows)?;
    let targets: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let targets_node = tape.constant(Mat::col_vec(&targets))?;
    let head = match mode {
        HeadMode::Linear => {
            let lambda = tape.exp(log_lambda)?;
            FittedHead::Ridge(ridge_fit(tape, z_arm, targets_node, lambda)?)
        }
        HeadMode::Gp => {
            let kernel = gp_kernel.ok_or(Error::Parameter {
                name: "head_mode",
                detail: "GP head mode requires GP kernel parameters in the shared set".into(),
            })?;
            FittedHead::Gp(gp_fit(tape, z_arm, targets_node, kernel)?)
        }
    };
    let on_support = head.predict(tape, z_all)?;
    Ok((head, on_support))
}

/// Closed-form adaptation of the shared parameters to one support set.
pub fn adapt(
    tape: &mut Tape,
    kind: LearnerKind,
    support: Support<'_>,
    bound: &BoundShared,
    head_mode: HeadMode,
    pi_clip: f64,
) -> Result<EpisodeAdaptation> {
    support.validate()?;
    if !(pi_clip > 0.0 && pi_clip < 0.5) {
        return Err(Error::Parameter {
            name: "pi_clip",
            detail: format!("propensity clip {pi_clip} outside (0, 0.5)"),
        });
    }
    if head_mode == HeadMode::Gp && bound.gp.is_none() {
        return Err(Error::Parameter {
            name: "head_mode",
            detail: "GP head mode requires GP kernel parameters in the shared set".into(),
        });
    }

    let x_node = tape.constant(support.x.clone())?;
    let z_mu = encode(tape, &bound.enc_mu, x_node)?;
    let rows0: Vec<usize> = support
        .a
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == 0)
        .map(|(i, _)| i)
        .collect();
    let rows1: Vec<usize> = support
        .a
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == 1)
        .map(|(i, _)| i)
        .collect();
    let gp = bound.gp.as_ref();
    let (mu0, mu0_support) = fit_arm_head(
        tape,
        z_mu,
        support.y,
        &rows0,
        head_mode,
        bound.log_lambda_0,
        gp.map(|g| &g.head_0),
    )?;
    let (mu1, mu1_support) = fit_arm_head(
        tape,
        z_mu,
        support.y,
        &rows1,
        head_mode,
        bound.log_lambda_1,
        gp.map(|g| &g.head_1),
    )?;

    let mut prototypes = None;
    let mut propensity_support = None;
    let pseudo = match kind {
        LearnerKind::Dr => {
            let z_p = encode(tape, &bound.enc_p, x_node)?;
            let protos = prototype_means(tape, z_p, support.a)?;
            let pi_raw = propensity(tape, z_p, &protos)?;
            let pi = tape.clamp(pi_raw, pi_clip, 1.0 - pi_clip)?;
            let ytilde = dr_pseudo_nodes(tape, support.y, support.a, pi, mu0_support, mu1_support)?;
            prototypes = Some(protos);
            propensity_support = Some(pi);
            Some(ytilde)
        }
        LearnerKind::Ra => Some(ra_pseudo_nodes(
            tape,
            support.y,
            support.a,
            mu0_support,
            mu1_support,
        )?),
        LearnerKind::Plugin => None,
    };

    let tau = match pseudo {
        Some(ytilde) => {
            let z_y = encode(tape, &bound.enc_y, x_node)?;
            let head = match head_mode {
                HeadMode::Linear => {
                    let lambda = tape.exp(bound.log_lambda_y)?;
                    FittedHead::Ridge(ridge_fit(tape, z_y, ytilde, lambda)?)
                }
                HeadMode::Gp => {
                    let kernel = &gp.expect("validated above").head_y;
                    FittedHead::Gp(gp_fit(tape, z_y, ytilde, kernel)?)
                }
            };
            Some(head)
        }
        None => None,
    };

    Ok(EpisodeAdaptation {
        kind,
        head_mode,
        prototypes,
        propensity_support,
        mu0,
        mu1,
        mu0_support,
        mu1_support,
        tau,
        pseudo_outcomes: pseudo,
        pi_clip,
    })
}

/// CATE estimates for query features under an adaptation, m×1 on the tape.
pub fn predict_cate(
    tape: &mut Tape,
    adaptation: &EpisodeAdaptation,
    x_query: &Mat,
    bound: &BoundShared,
) -> Result<NodeId> {
    let x_node = tape.constant(x_query.clone())?;
    match adaptation.kind {
        LearnerKind::Dr | LearnerKind::Ra => {
            let z_y = encode(tape, &bound.enc_y, x_node)?;
            let tau = adaptation.tau.as_ref().ok_or_else(|| {
                Error::Episode("adaptation is missing its effect head".into())
            })?;
            tau.predict(tape, z_y)
        }
        LearnerKind::Plugin => {
            let z_mu = encode(tape, &bound.enc_mu, x_node)?;
            let mu1 = adaptation.mu1.predict(tape, z_mu)?;
            let mu0 = adaptation.mu0.predict(tape, z_mu)?;
            tape.sub(mu1, mu0)
        }
    }
}
