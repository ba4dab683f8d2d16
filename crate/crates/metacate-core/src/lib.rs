//! Few-shot conditional average treatment effect (CATE) estimation by
//! meta-learning task-shared encoders whose per-task adaptation is a
//! differentiable closed-form solve (prototype means, ridge regression,
//! GP posterior means) rather than an inner gradient loop.
//!
//! The crate is layered bottom-up:
//! - [`mat`] / [`tape`]: dense f64 matrices and a reverse-mode autodiff tape
//!   whose primitives include a symmetric-positive-definite linear solve, so
//!   gradients flow through the closed-form adaptations.
//! - [`nn`]: the task-shared MLP encoders and the Adam optimizer.
//! - [`heads`]: closed-form task heads (prototype propensity, ridge, GP).
//! - [`metalearner`]: DR / RA / plugin pseudo-outcome CATE estimators
//!   assembled from adapted heads.
//! - [`pseudocate`]: pseudo-CATE labeling of meta-training tasks with a
//!   conventional RA-Learner fit on the full task data.
//! - [`episodic`]: episode sampling, the CATE loss, and the meta-training
//!   loop with early stopping.
//! - [`data`]: the synthetic task generator, task CSV I/O, and splits.
//! - [`eval`]: PEHE, task-local baselines, and the experiment runner.

pub mod data;
pub mod episodic;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod mat;
pub mod metalearner;
pub mod nn;
pub mod pseudocate;
pub mod seeds;
pub mod tape;

pub use error::{Error, Result};
pub use mat::Mat;
pub use tape::{GradientMap, NodeId, Tape};
