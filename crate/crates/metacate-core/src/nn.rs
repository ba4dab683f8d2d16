//! Task-shared MLP encoders, the pool of all meta-learned parameters, and
//! the Adam optimizer that updates them.
//!
//! Three encoders share one architecture (input d → 32 → 32 → 32, ReLU
//! hidden activations, linear final layer): `enc_p` feeds the prototype
//! propensity head, `enc_mu` feeds both outcome heads (weights shared
//! between arms), and `enc_y` feeds the pseudo-outcome head. Ridge
//! regularizers λ are meta-learned in log space so they stay positive;
//! in GP mode each head instead carries meta-learned RBF kernel
//! parameters (log lengthscale, log signal variance, log jitter).

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tape::{GradientMap, NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Hidden and output width of every encoder (32 units per layer).
pub const ENCODED_DIM: usize = 32;

/// Which closed-form head family the shared parameters serve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Linear,
    Gp,
}

/// Weights and biases of one 3-layer encoder (d → 32 → 32 → 32).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub w3: Mat,
    pub b3: Mat,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let layer = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-lim..lim))
        };
        EncoderParams {
            w1: layer(d, ENCODED_DIM, rng),
            b1: Mat::zeros(1, ENCODED_DIM),
            w2: layer(ENCODED_DIM, ENCODED_DIM, rng),
            b2: Mat::zeros(1, ENCODED_DIM),
            w3: layer(ENCODED_DIM, ENCODED_DIM, rng),
            b3: Mat::zeros(1, ENCODED_DIM),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
        f(&format!("{prefix}.w3"), &self.w3);
        f(&format!("{prefix}.b3"), &self.b3);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
        f(&format!("{prefix}.w3"), &mut self.w3);
        f(&format!("{prefix}.b3"), &mut self.b3);
    }
}

/// Meta-learned RBF kernel parameters for one GP head, in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpKernelParams {
    pub log_lengthscale: Mat,
    pub log_signal: Mat,
    pub log_jitter: Mat,
}

impl GpKernelParams {
    fn init() -> Self {
        GpKernelParams {
            log_lengthscale: Mat::scalar(0.0),
            log_signal: Mat::scalar(0.0),
            log_jitter: Mat::scalar((1e-4f64).ln()),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Mat)) {
        f(&format!("{prefix}.log_lengthscale"), &self.log_lengthscale);
        f(&format!("{prefix}.log_signal"), &self.log_signal);
        f(&format!("{prefix}.log_jitter"), &self.log_jitter);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&format!("{prefix}.log_lengthscale"), &mut self.log_lengthscale);
        f(&format!("{prefix}.log_signal"), &mut self.log_signal);
        f(&format!("{prefix}.log_jitter"), &mut self.log_jitter);
    }
}

/// Kernel parameters for the three GP heads (μ₀, μ₁, pseudo-outcome).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub head_0: GpKernelParams,
    pub head_1: GpKernelParams,
    pub head_y: GpKernelParams,
}

/// Every task-shared trainable: the three encoders plus per-head
/// regularization (log λ in linear mode, kernel parameters in GP mode).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    pub enc_p: EncoderParams,
    pub enc_mu: EncoderParams,
    pub enc_y: EncoderParams,
    pub log_lambda_0: Mat,
    pub log_lambda_1: Mat,
    pub log_lambda_y: Mat,
    pub gp: Option<GpParams>,
}

impl SharedParams {
    pub fn input_dim(&self) -> usize {
        self.enc_p.input_dim()
    }

    pub fn head_mode(&self) -> HeadMode {
        if self.gp.is_some() {
            HeadMode::Gp
        } else {
            HeadMode::Linear
        }
    }

    /// Visit every parameter block with its canonical name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Mat)) {
        self.enc_p.visit("enc_p", f);
        self.enc_mu.visit("enc_mu", f);
        self.enc_y.visit("enc_y", f);
        f("log_lambda_0", &self.log_lambda_0);
        f("log_lambda_1", &self.log_lambda_1);
        f("log_lambda_y", &self.log_lambda_y);
        if let Some(gp) = &self.gp {
            gp.head_0.visit("gp_0", f);
            gp.head_1.visit("gp_1", f);
            gp.head_y.visit("gp_y", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.enc_p.visit_mut("enc_p", f);
        self.enc_mu.visit_mut("enc_mu", f);
        self.enc_y.visit_mut("enc_y", f);
        f("log_lambda_0", &mut self.log_lambda_0);
        f("log_lambda_1", &mut self.log_lambda_1);
        f("log_lambda_y", &mut self.log_lambda_y);
        if let Some(gp) = &mut self.gp {
            gp.head_0.visit_mut("gp_0", f);
            gp.head_1.visit_mut("gp_1", f);
            gp.head_y.visit_mut("gp_y", f);
        }
    }

    /// Snapshot as a name → tensor map (used by tests and diagnostics).
    pub fn to_map(&self) -> BTreeMap<String, Mat> {
        let mut map = BTreeMap::new();
        self.visit(&mut |name, m| {
            map.insert(name.to_string(), m.clone());
        });
        map
    }
}

/// Glorot-uniform encoders, zero biases, λ = 1 (log 0); in GP mode the
/// kernel parameters start at 1 (log 0) with jitter 1e-4. Deterministic
/// in the seed.
pub fn init_shared(seed: u64, d: usize, mode: HeadMode) -> Result<SharedParams> {
    if d < 1 {
        return Err(Error::Parameter {
            name: "d",
            detail: "input dimension must be at least 1".into(),
        });
    }
    let mut rng = crate::seeds::rng_for(seed, "init-shared", 0);
    Ok(SharedParams {
        enc_p: EncoderParams::glorot(d, &mut rng),
        enc_mu: EncoderParams::glorot(d, &mut rng),
        enc_y: EncoderParams::glorot(d, &mut rng),
        log_lambda_0: Mat::scalar(0.0),
        log_lambda_1: Mat::scalar(0.0),
        log_lambda_y: Mat::scalar(0.0),
        gp: match mode {
            HeadMode::Linear => None,
            HeadMode::Gp => Some(GpParams {
                head_0: GpKernelParams::init(),
                head_1: GpKernelParams::init(),
                head_y: GpKernelParams::init(),
            }),
        },
    })
}

/// One encoder's parameters bound onto a tape as differentiable leaves.
#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGpKernel {
    pub log_lengthscale: NodeId,
    pub log_signal: NodeId,
    pub log_jitter: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGp {
    pub head_0: BoundGpKernel,
    pub head_1: BoundGpKernel,
    pub head_y: BoundGpKernel,
}

/// All shared parameters bound onto one tape for an episode batch.
#[derive(Clone, Debug)]
pub struct BoundShared {
    pub enc_p: BoundEncoder,
    pub enc_mu: BoundEncoder,
    pub enc_y: BoundEncoder,
    pub log_lambda_0: NodeId,
    pub log_lambda_1: NodeId,
    pub log_lambda_y: NodeId,
    pub gp: Option<BoundGp>,
}

fn bind_encoder(tape: &mut Tape, enc: &EncoderParams) -> Result<BoundEncoder> {
    Ok(BoundEncoder {
        w1: tape.var(enc.w1.clone())?,
        b1: tape.var(enc.b1.clone())?,
        w2: tape.var(enc.w2.clone())?,
        b2: tape.var(enc.b2.clone())?,
        w3: tape.var(enc.w3.clone())?,
        b3: tape.var(enc.b3.clone())?,
    })
}

fn bind_gp_kernel(tape: &mut Tape, k: &GpKernelParams) -> Result<BoundGpKernel> {
    Ok(BoundGpKernel {
        log_lengthscale: tape.var(k.log_lengthscale.clone())?,
        log_signal: tape.var(k.log_signal.clone())?,
        log_jitter: tape.var(k.log_jitter.clone())?,
    })
}

/// Bind every shared parameter as a differentiable leaf on the tape.
pub fn bind_shared(tape: &mut Tape, shared: &SharedParams) -> Result<BoundShared> {
    Ok(BoundShared {
        enc_p: bind_encoder(tape, &shared.enc_p)?,
        enc_mu: bind_encoder(tape, &shared.enc_mu)?,
        enc_y: bind_encoder(tape, &shared.enc_y)?,
        log_lambda_0: tape.var(shared.log_lambda_0.clone())?,
        log_lambda_1: tape.var(shared.log_lambda_1.clone())?,
        log_lambda_y: tape.var(shared.log_lambda_y.clone())?,
        gp: match &shared.gp {
            None => None,
            Some(gp) => Some(BoundGp {
                head_0: bind_gp_kernel(tape, &gp.head_0)?,
                head_1: bind_gp_kernel(tape, &gp.head_1)?,
                head_y: bind_gp_kernel(tape, &gp.head_y)?,
            }),
        },
    })
}

impl BoundShared {
    fn for_each_bound(&self, f: &mut dyn FnMut(&str, NodeId)) {
        let enc = |prefix: &str, e: &BoundEncoder, f: &mut dyn FnMut(&str, NodeId)| {
            f(&format!("{prefix}.w1"), e.w1);
            f(&format!("{prefix}.b1"), e.b1);
            f(&format!("{prefix}.w2"), e.w2);
            f(&format!("{prefix}.b2"), e.b2);
            f(&format!("{prefix}.w3"), e.w3);
            f(&format!("{prefix}.b3"), e.b3);
        };
        enc("enc_p", &self.enc_p, f);
        enc("enc_mu", &self.enc_mu, f);
        enc("enc_y", &self.enc_y, f);
        f("log_lambda_0", self.log_lambda_0);
        f("log_lambda_1", self.log_lambda_1);
        f("log_lambda_y", self.log_lambda_y);
        if let Some(gp) = &self.gp {
            let kern = |prefix: &str, k: &BoundGpKernel, f: &mut dyn FnMut(&str, NodeId)| {
                f(&format!("{prefix}.log_lengthscale"), k.log_lengthscale);
                f(&format!("{prefix}.log_signal"), k.log_signal);
                f(&format!("{prefix}.log_jitter"), k.log_jitter);
            };
            kern("gp_0", &gp.head_0, f);
            kern("gp_1", &gp.head_1, f);
            kern("gp_y", &gp.head_y, f);
        }
    }

    /// Node id of each parameter block by canonical name.
    pub fn node_ids(&self) -> BTreeMap<String, NodeId> {
        let mut map = BTreeMap::new();
        self.for_each_bound(&mut |name, id| {
            map.insert(name.to_string(), id);
        });
        map
    }

    /// Collect per-block gradients by canonical name; unreached blocks are
    /// absent (zero gradient).
    pub fn named_grads(&self, grads: &GradientMap) -> BTreeMap<String, Mat> {
        let mut map = BTreeMap::new();
        self.for_each_bound(&mut |name, id| {
            if let Some(g) = grads.get(id) {
                map.insert(name.to_string(), g.clone());
            }
        });
        map
    }
}

/// Forward pass ReLU(ReLU(x·W₁+b₁)·W₂+b₂)·W₃+b₃ (final layer linear).
/// Biases broadcast over rows via a ones-column product, and an n=0 input
/// yields a 0×32 output.
pub fn encode(tape: &mut Tape, enc: &BoundEncoder, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let ones = tape.constant(Mat::filled(n, 1, 1.0))?;
    let layer = |tape: &mut Tape, input: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
        let prod = tape.matmul(input, w)?;
        let bias = tape.matmul(ones, b)?;
        tape.add(prod, bias)
    };
    let h1 = layer(tape, x, enc.w1, enc.b1)?;
    let h1 = tape.relu(h1)?;
    let h2 = layer(tape, h1, enc.w2, enc.b2)?;
    let h2 = tape.relu(h2)?;
    layer(tape, h2, enc.w3, enc.b3)
}

/// Adam on named parameter blocks. Moments live per block name; blocks
/// with no gradient this step are left untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter block that received a gradient.
    pub fn step(&mut self, params: &mut SharedParams, grads: &BTreeMap<String, Mat>) -> Result<()> {
        self.step_visit(|f| params.visit_mut(f), grads)
    }

    /// Generic form over any named parameter collection.
    pub fn step_visit(
        &mut self,
        visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Mat)),
        grads: &BTreeMap<String, Mat>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numerical {
                    op: "adam_step",
                    detail: format!("non-finite gradient for block {name}"),
                });
            }
        }
        if grads.is_empty() {
            return Ok(());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.epsilon);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        let mut failure: Option<String> = None;
        visit_mut(&mut |name: &str, p: &mut Mat| {
            let g = match grads.get(name) {
                Some(g) => g,
                None => return,
            };
            if !g.same_shape(p) {
                failure = Some(format!(
                    "gradient shape {:?} does not match block {name} {:?}",
                    g.shape(),
                    p.shape()
                ));
                return;
            }
            let m = m_map
                .entry(name.to_string())
                .or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
            let v = v_map
                .entry(name.to_string())
                .or_insert_with(|| Mat::zeros(p.rows(), p.cols()));
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(detail) => Err(Error::Shape {
                op: "adam_step",
                detail,
            }),
            None => Ok(()),
        }
    }
}
