//! Closed-form task-specific heads, all recorded on the tape so the outer
//! loss can differentiate through them: prototype means with a
//! distance-softmax propensity, ridge regression solved in closed form
//! (with an automatic Woodbury route when the support is smaller than the
//! encoded dimension), and GP posterior means under an RBF kernel.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::BoundGpKernel;
use crate::tape::{NodeId, Tape};

/// Per-arm prototype vectors (1×K rows) on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Prototypes {
    pub p0: NodeId,
    pub p1: NodeId,
}

/// Arm-wise empirical means of the encoded support rows.
pub fn prototype_means(tape: &mut Tape, z_support: NodeId, a: &[u8]) -> Result<Prototypes> {
    let n = tape.value(z_support).rows();
    if a.len() != n {
        return Err(Error::Shape {
            op: "prototype_means",
            detail: format!("{} treatments for {} encoded rows", a.len(), n),
        });
    }
    let mut mean_row = |arm: u8| -> Result<NodeId> {
        let members: Vec<usize> = (0..n).filter(|&i| a[i] == arm).collect();
        if members.is_empty() {
            return Err(Error::Episode(format!(
                "support arm {} is empty; prototypes need at least one instance per arm",
                arm
            )));
        }
        let w = 1.0 / members.len() as f64;
        let mut sel = Mat::zeros(1, n);
        for &i in &members {
            sel.set(0, i, w);
        }
        let sel = tape.constant(sel)?;
        tape.matmul(sel, z_support)
    };
    Ok(Prototypes {
        p0: mean_row(0)?,
        p1: mean_row(1)?,
    })
}

/// Softmax over negative squared distances to the two prototypes,
/// returning P(a=1 | z) for each row of z as an m×1 node.
///
/// Stability: the softmax reduces to a logistic in the distance gap
/// Δ = ‖z−θ₁‖² − ‖z−θ₀‖², and Δ is clipped to ±30 before
/// exponentiation — the saturated probabilities differ from the exact
/// ones by < 1e-13, and gradients stay finite.
pub fn propensity(tape: &mut Tape, z: NodeId, protos: &Prototypes) -> Result<NodeId> {
    let m = tape.value(z).rows();
    // Δ = 2·z·(θ₀−θ₁)ᵀ + (‖θ₁‖² − ‖θ₀‖²), the ‖z‖² terms cancel.
    let diff = tape.sub(protos.p0, protos.p1)?;
    let diff_t = tape.transpose(diff)?;
    let cross = tape.matmul(z, diff_t)?;
    let cross = tape.scale(cross, 2.0)?;
    let p1_sq = tape.square(protos.p1)?;
    let n1 = tape.sum(p1_sq)?;
    let p0_sq = tape.square(protos.p0)?;
    let n0 = tape.sum(p0_sq)?;
    let norm_gap = tape.sub(n1, n0)?;
    let ones_m = tape.constant(Mat::filled(m, 1, 1.0))?;
    let norm_gap = tape.matmul(ones_m, norm_gap)?;
    let delta = tape.add(cross, norm_gap)?;
    let delta = tape.clamp(delta, -30.0, 30.0)?;
    let e = tape.exp(delta)?;
    let denom = tape.offset(e, 1.0)?;
    tape.div(ones_m, denom)
}

/// Which linear-algebra route `ridge_fit` takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RidgePath {
    /// Woodbury when the support is smaller than the encoded dimension.
    Auto,
    /// (ZᵀZ+λI_K)⁻¹Zᵀy.
    Direct,
    /// Zᵀ(ZZᵀ+λI_n)⁻¹y.
    Woodbury,
}

/// Closed-form ridge solution on the tape: a K×1 coefficient node plus the
/// λ node used to build it.
#[derive(Clone, Copy, Debug)]
pub struct RidgeHead {
    pub theta: NodeId,
    pub lambda: NodeId,
}

/// θ = (ZᵀZ+λI)⁻¹Zᵀy, via the Woodbury identity θ = Zᵀ(ZZᵀ+λI)⁻¹y when
/// the support has fewer rows than columns. Differentiable wrt z, y and λ.
pub fn ridge_fit(tape: &mut Tape, z: NodeId, y: NodeId, lambda: NodeId) -> Result<RidgeHead> {
    ridge_fit_with(tape, z, y, lambda, RidgePath::Auto)
}

/// `ridge_fit` with an explicit path choice (the two routes are
/// cross-checked in tests).
pub fn ridge_fit_with(
    tape: &mut Tape,
    z: NodeId,
    y: NodeId,
    lambda: NodeId,
    path: RidgePath,
) -> Result<RidgeHead> {
    let (n, k) = tape.value(z).shape();
    if n < 1 {
        return Err(Error::Parameter {
            name: "z",
            detail: "ridge fit needs at least one support row".into(),
        });
    }
    if tape.value(y).shape() != (n, 1) {
        return Err(Error::Shape {
            op: "ridge_fit",
            detail: format!("targets {:?} for {} support rows", tape.value(y).shape(), n),
        });
    }
    let lam = tape.value(lambda);
    if lam.shape() != (1, 1) || lam.scalar_value() <= 0.0 {
        return Err(Error::Parameter {
            name: "lambda",
            detail: format!("regularizer must be a positive scalar, got {:?}", lam),
        });
    }
    let woodbury = match path {
        RidgePath::Auto => n < k,
        RidgePath::Direct => false,
        RidgePath::Woodbury => true,
    };
    let theta = if woodbury {
        let zt = tape.transpose(z)?;
        let gram = tape.matmul(z, zt)?;
        let eye = tape.constant(Mat::eye(n))?;
        let lam_eye = tape.scale_by(lambda, eye)?;
        let system = tape.add(gram, lam_eye)?;
        let dual = tape.solve_spd(system, y)?;
        tape.matmul(zt, dual)?
    } else {
        let zt = tape.transpose(z)?;
        let gram = tape.matmul(zt, z)?;
        let eye = tape.constant(Mat::eye(k))?;
        let lam_eye = tape.scale_by(lambda, eye)?;
        let system = tape.add(gram, lam_eye)?;
        let zty = tape.matmul(zt, y)?;
        tape.solve_spd(system, zty)?
    };
    Ok(RidgeHead { theta, lambda })
}

/// Linear head prediction z·θ as an m×1 node.
pub fn ridge_predict(tape: &mut Tape, head: &RidgeHead, z: NodeId) -> Result<NodeId> {
    tape.matmul(z, head.theta)
}

/// Off-tape ridge solve for task-local baselines and test oracles.
pub fn ridge_solve_plain(x: &Mat, y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(Error::Parameter {
            name: "lambda",
            detail: format!("regularizer must be positive, got {}", lambda),
        });
    }
    let (n, k) = x.shape();
    if y.len() != n || n == 0 {
        return Err(Error::Shape {
            op: "ridge_solve_plain",
            detail: format!("{} targets for {} rows", y.len(), n),
        });
    }
    let yv = Mat::col_vec(y);
    let theta = if n < k {
        let gram = x.matmul(&x.transpose()).add(&Mat::eye(n).scale(lambda));
        let dual = gram.cholesky()?.solve(&yv);
        x.transpose().matmul(&dual)
    } else {
        let xt = x.transpose();
        let gram = xt.matmul(x).add(&Mat::eye(k).scale(lambda));
        gram.cholesky()?.solve(&xt.matmul(&yv))
    };
    Ok(theta.data().to_vec())
}

/// GP posterior-mean head: the support encodings, the kernel nodes, and
/// the cached solve (K^s + jitter·I)⁻¹·targets.
#[derive(Clone, Copy, Debug)]
pub struct GpHead {
    pub z_support: NodeId,
    /// Row sums of squared support encodings (n×1), reused by predict.
    sq_support: NodeId,
    /// σ² node.
    signal: NodeId,
    /// 1/(2ℓ²) node.
    half_inv_sq_len: NodeId,
    /// (K^s + jitter·I)⁻¹·targets, n×1.
    pub cache: NodeId,
}

fn row_square_sums(tape: &mut Tape, z: NodeId) -> Result<NodeId> {
    let k = tape.value(z).cols();
    let sq = tape.square(z)?;
    let ones = tape.constant(Mat::filled(k, 1, 1.0))?;
    tape.matmul(sq, ones)
}

/// Pairwise squared distances between row sets as an m×n node.
fn squared_distances(
    tape: &mut Tape,
    za: NodeId,
    sq_a: NodeId,
    zb: NodeId,
    sq_b: NodeId,
) -> Result<NodeId> {
    let m = tape.value(za).rows();
    let n = tape.value(zb).rows();
    let ones_row = tape.constant(Mat::filled(1, n, 1.0))?;
    let left = tape.matmul(sq_a, ones_row)?;
    let ones_col = tape.constant(Mat::filled(m, 1, 1.0))?;
    let sq_b_t = tape.transpose(sq_b)?;
    let right = tape.matmul(ones_col, sq_b_t)?;
    let zb_t = tape.transpose(zb)?;
    let cross = tape.matmul(za, zb_t)?;
    let cross = tape.scale(cross, -2.0)?;
    let sums = tape.add(left, right)?;
    tape.add(sums, cross)
}

/// RBF kernel block σ²·exp(−D/(2ℓ²)) from a squared-distance node.
fn rbf_from_distances(
    tape: &mut Tape,
    dist: NodeId,
    signal: NodeId,
    half_inv_sq_len: NodeId,
) -> Result<NodeId> {
    let neg = tape.scale(dist, -1.0)?;
    let scaled = tape.scale_by(half_inv_sq_len, neg)?;
    let e = tape.exp(scaled)?;
    tape.scale_by(signal, e)
}

/// Fit a GP head: cache (K^s + jitter·I)⁻¹·targets with
/// K^s_ij = σ²·exp(−‖z_i−z_j‖²/(2ℓ²)). Differentiable wrt encodings,
/// targets, and the kernel parameters.
pub fn gp_fit(
    tape: &mut Tape,
    z_support: NodeId,
    targets: NodeId,
    kernel: &BoundGpKernel,
) -> Result<GpHead> {
    let n = tape.value(z_support).rows();
    if n < 1 {
        return Err(Error::Parameter {
            name: "z_support",
            detail: "GP fit needs at least one support row".into(),
        });
    }
    if tape.value(targets).shape() != (n, 1) {
        return Err(Error::Shape {
            op: "gp_fit",
            detail: format!(
                "targets {:?} for {} support rows",
                tape.value(targets).shape(),
                n
            ),
        });
    }
    let signal = tape.exp(kernel.log_signal)?;
    // 1/(2ℓ²) = exp(−2·logℓ)/2.
    let neg2 = tape.scale(kernel.log_lengthscale, -2.0)?;
    let inv_sq = tape.exp(neg2)?;
    let half_inv_sq_len = tape.scale(inv_sq, 0.5)?;
    let jitter = tape.exp(kernel.log_jitter)?;

    let sq_support = row_square_sums(tape, z_support)?;
    let dist = squared_distances(tape, z_support, sq_support, z_support, sq_support)?;
    let kmat = rbf_from_distances(tape, dist, signal, half_inv_sq_len)?;
    let eye = tape.constant(Mat::eye(n))?;
    let jitter_eye = tape.scale_by(jitter, eye)?;
    let system = tape.add(kmat, jitter_eye)?;
    let cache = tape.solve_spd(system, targets).map_err(|e| match e {
        Error::Numerical { detail, .. } => Error::Numerical {
            op: "gp_fit",
            detail: format!("{detail}; consider increasing the jitter"),
        },
        other => other,
    })?;
    Ok(GpHead {
        z_support,
        sq_support,
        signal,
        half_inv_sq_len,
        cache,
    })
}

/// Posterior mean at query encodings: k(z_query, Z^s)·cache.
pub fn gp_predict(tape: &mut Tape, head: &GpHead, z: NodeId) -> Result<NodeId> {
    if tape.value(z).cols() != tape.value(head.z_support).cols() {
        return Err(Error::Shape {
            op: "gp_predict",
            detail: format!(
                "query dim {} vs support dim {}",
                tape.value(z).cols(),
                tape.value(head.z_support).cols()
            ),
        });
    }
    let sq_q = row_square_sums(tape, z)?;
    let dist = squared_distances(tape, z, sq_q, head.z_support, head.sq_support)?;
    let kvec = rbf_from_distances(tape, dist, head.signal, head.half_inv_sq_len)?;
    tape.matmul(kvec, head.cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn const_kernel(tape: &mut Tape, lengthscale: f64, signal: f64, jitter: f64) -> BoundGpKernel {
        BoundGpKernel {
            log_lengthscale: tape.constant(Mat::scalar(lengthscale.ln())).unwrap(),
            log_signal: tape.constant(Mat::scalar(signal.ln())).unwrap(),
            log_jitter: tape.constant(Mat::scalar(jitter.ln())).unwrap(),
        }
    }

    #[test]
    fn prototype_of_single_instance_is_that_encoding() {
        let mut t = Tape::new();
        let z = t
            .var(Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]))
            .unwrap();
        let protos = prototype_means(&mut t, z, &[0, 1]).unwrap();
        assert_eq!(t.value(protos.p0).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(t.value(protos.p1).data(), &[-1.0, 0.0, 4.0]);
    }

    #[test]
    fn prototype_is_arm_mean() {
        let mut t = Tape::new();
        let z = t
            .var(Mat::from_vec(3, 2, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let protos = prototype_means(&mut t, z, &[0, 1, 1]).unwrap();
        assert_eq!(t.value(protos.p1).data(), &[2.0, 3.0]);
    }

    #[test]
    fn prototype_rejects_empty_arm() {
        let mut t = Tape::new();
        let z = t.var(Mat::from_vec(2, 2, vec![1.0; 4])).unwrap();
        assert!(matches!(
            prototype_means(&mut t, z, &[1, 1]),
            Err(Error::Episode(_))
        ));
    }

    #[test]
    fn prototypes_ignore_support_order() {
        let rows = vec![
            vec![1.0, 0.5],
            vec![-2.0, 1.0],
            vec![0.0, 3.0],
            vec![4.0, -1.0],
        ];
        let arms = [0u8, 1, 0, 1];
        let build = |order: &[usize]| {
            let mut t = Tape::new();
            let mut data = Vec::new();
            let mut a = Vec::new();
            for &i in order {
                data.extend_from_slice(&rows[i]);
                a.push(arms[i]);
            }
            let z = t.var(Mat::from_vec(4, 2, data)).unwrap();
            let p = prototype_means(&mut t, z, &a).unwrap();
            (t.value(p.p0).clone(), t.value(p.p1).clone())
        };
        let (a0, a1) = build(&[0, 1, 2, 3]);
        let (b0, b1) = build(&[3, 2, 1, 0]);
        assert!(a0.sub(&b0).max_abs() < 1e-12);
        assert!(a1.sub(&b1).max_abs() < 1e-12);
    }

    #[test]
    fn propensity_is_half_when_equidistant() {
        let mut t = Tape::new();
        let z = t.var(Mat::from_vec(1, 2, vec![0.0, 0.0])).unwrap();
        let p0 = t.constant(Mat::row_vec(&[1.0, 0.0])).unwrap();
        let p1 = t.constant(Mat::row_vec(&[-1.0, 0.0])).unwrap();
        let pi = propensity(&mut t, z, &Prototypes { p0, p1 }).unwrap();
        assert!((t.value(pi).scalar_value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn propensity_matches_logistic_of_distance_gap() {
        // 1-D: z=0, θ₁=0, θ₀=2 ⇒ π = 1/(1+e⁻⁴) ≈ 0.98201.
        let mut t = Tape::new();
        let z = t.var(Mat::scalar(0.0)).unwrap();
        let p0 = t.constant(Mat::scalar(2.0)).unwrap();
        let p1 = t.constant(Mat::scalar(0.0)).unwrap();
        let pi = propensity(&mut t, z, &Prototypes { p0, p1 }).unwrap();
        let expected = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((t.value(pi).scalar_value() - expected).abs() < 1e-9);
        assert!((t.value(pi).scalar_value() - 0.98201).abs() < 1e-5);
    }

    #[test]
    fn arm_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = rand_mat(&mut rng, 5, 4);
        let p0v = rand_mat(&mut rng, 1, 4);
        let p1v = rand_mat(&mut rng, 1, 4);
        let mut t = Tape::new();
        let z = t.var(z0).unwrap();
        let p0 = t.constant(p0v).unwrap();
        let p1 = t.constant(p1v).unwrap();
        let pi1 = propensity(&mut t, z, &Prototypes { p0, p1 }).unwrap();
        // Swapping prototypes yields the arm-0 probability.
        let pi0 = propensity(&mut t, z, &Prototypes { p0: p1, p1: p0 }).unwrap();
        let total = t.add(pi0, pi1).unwrap();
        for &v in t.value(total).data() {
            assert!((v - 1.0).abs() < 1e-12);
            }
        for &v in t.value(pi1).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn ridge_scalar_example() {
        let mut t = Tape::new();
        let z = t.var(Mat::scalar(1.0)).unwrap();
        let y = t.constant(Mat::scalar(2.0)).unwrap();
        let lam = t.scalar_const(1.0).unwrap();
        let head = ridge_fit(&mut t, z, y, lam).unwrap();
        assert!((t.value(head.theta).scalar_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_heavy_shrinkage_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = rand_mat(&mut rng, 10, 4);
        let y0 = rand_mat(&mut rng, 10, 1);
        let mut t = Tape::new();
        let z = t.var(z0.clone()).unwrap();
        let y = t.constant(y0.clone()).unwrap();
        let lam = t.scalar_const(1e9).unwrap();
        let head = ridge_fit(&mut t, z, y, lam).unwrap();
        let zty = z0.transpose().matmul(&y0);
        assert!(t.value(head.theta).max_abs() <= 1e-6 * zty.max_abs());
    }

    #[test]
    fn ridge_rejects_non_positive_lambda() {
        let mut t = Tape::new();
        let z = t.var(Mat::scalar(1.0)).unwrap();
        let y = t.constant(Mat::scalar(2.0)).unwrap();
        let lam = t.scalar_const(0.0).unwrap();
        assert!(matches!(
            ridge_fit(&mut t, z, y, lam),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn woodbury_and_direct_paths_agree() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let z0 = rand_mat(&mut rng, 6, 32);
            let y0 = rand_mat(&mut rng, 6, 1);
            let mut t = Tape::new();
            let z = t.var(z0).unwrap();
            let y = t.constant(y0).unwrap();
            let lam = t.scalar_const(0.37).unwrap();
            let direct = ridge_fit_with(&mut t, z, y, lam, RidgePath::Direct).unwrap();
            let wood = ridge_fit_with(&mut t, z, y, lam, RidgePath::Woodbury).unwrap();
            let gap = t
                .value(direct.theta)
                .sub(t.value(wood.theta))
                .max_abs();
            assert!(gap <= 1e-8, "seed {}: path gap {}", seed, gap);
        }
    }

    #[test]
    fn ridge_predict_trivial_cases() {
        let mut t = Tape::new();
        let zfit = t.var(Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        let y = t.constant(Mat::col_vec(&[0.0, 0.0])).unwrap();
        let lam = t.scalar_const(1.0).unwrap();
        let head = ridge_fit(&mut t, zfit, y, lam).unwrap();
        let zq = t.constant(Mat::filled(2, 3, 1.0)).unwrap();
        let pred = ridge_predict(&mut t, &head, zq).unwrap();
        assert!(t.value(pred).max_abs() < 1e-12);

        // θ of all ones on a row of ones predicts K.
        let theta = t.var(Mat::col_vec(&[1.0, 1.0, 1.0])).unwrap();
        let handmade = RidgeHead { theta, lambda: lam };
        let row = t.constant(Mat::filled(1, 3, 1.0)).unwrap();
        let pred = ridge_predict(&mut t, &handmade, row).unwrap();
        assert_eq!(t.value(pred).scalar_value(), 3.0);
    }

    #[test]
    fn ridge_interpolates_in_span_with_vanishing_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0 = rand_mat(&mut rng, 40, 8);
        let theta_true = rand_mat(&mut rng, 8, 1);
        let y0 = z0.matmul(&theta_true);
        let mut t = Tape::new();
        let z = t.var(z0.clone()).unwrap();
        let y = t.constant(y0.clone()).unwrap();
        let lam = t.scalar_const(1e-10).unwrap();
        let head = ridge_fit(&mut t, z, y, lam).unwrap();
        let pred = ridge_predict(&mut t, &head, z).unwrap();
        assert!(t.value(pred).sub(&y0).max_abs() <= 1e-4);
    }

    /// Independent iterative referee: plain gradient descent on the ridge
    /// objective Σ(y−zθ)² + λ‖θ‖², run to convergence.
    pub fn ridge_gd_oracle(z: &Mat, y: &Mat, lambda: f64) -> Mat {
        let (_, k) = z.shape();
        let zt = z.transpose();
        let zty = zt.matmul(y);
        let gram = zt.matmul(z);
        // Lipschitz constant of the gradient: 2(‖ZᵀZ‖ + λ); the row-sum
        // norm upper-bounds the spectral norm.
        let mut row_norm: f64 = 0.0;
        for i in 0..k {
            let s: f64 = (0..k).map(|j| gram.get(i, j).abs()).sum();
            row_norm = row_norm.max(s);
        }
        let step = 1.0 / (2.0 * (row_norm + lambda));
        let mut theta = Mat::zeros(k, 1);
        for _ in 0..500_000 {
            // ∇ = 2(ZᵀZθ − Zᵀy) + 2λθ
            let grad = gram
                .matmul(&theta)
                .sub(&zty)
                .add(&theta.scale(lambda))
                .scale(2.0);
            if grad.max_abs() < 1e-12 {
                break;
            }
            theta = theta.sub(&grad.scale(step));
        }
        theta
    }

    #[test]
    fn ridge_matches_gradient_descent_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let n = 3 + (seed as usize % 3) * 4;
            let z0 = rand_mat(&mut rng, n, 32);
            let y0 = rand_mat(&mut rng, n, 1);
            let mut t = Tape::new();
            let z = t.var(z0.clone()).unwrap();
            let y = t.constant(y0.clone()).unwrap();
            let lam = t.scalar_const(0.8).unwrap();
            let head = ridge_fit(&mut t, z, y, lam).unwrap();
            let oracle = ridge_gd_oracle(&z0, &y0, 0.8);
            let gap = t.value(head.theta).sub(&oracle).max_abs();
            assert!(gap <= 1e-4, "seed {}: gap {}", seed, gap);
        }
    }

    #[test]
    fn ridge_gradient_wrt_encodings_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = rand_mat(&mut rng, 5, 4);
        let y0 = rand_mat(&mut rng, 5, 1);
        let zq0 = rand_mat(&mut rng, 3, 4);
        let run = |zm: &Mat| {
            let mut t = Tape::new();
            let z = t.var(zm.clone()).unwrap();
            let y = t.constant(y0.clone()).unwrap();
            let lam = t.scalar_const(0.5).unwrap();
            let head = ridge_fit(&mut t, z, y, lam).unwrap();
            let zq = t.constant(zq0.clone()).unwrap();
            let pred = ridge_predict(&mut t, &head, zq).unwrap();
            let sq = t.square(pred).unwrap();
            let loss = t.sum(sq).unwrap();
            (t, z, loss)
        };
        let (t, z, loss) = run(&z0);
        let grads = t.backward(loss).unwrap();
        let fd = central_diff(&z0, 1e-5, |m| {
            let (t, _, loss) = run(m);
            t.value(loss).scalar_value()
        });
        assert!(max_rel_err(&fd, grads.get(z).unwrap()) <= 1e-4);
    }

    #[test]
    fn gp_single_point_cache_and_diagonal() {
        let mut t = Tape::new();
        let kernel = const_kernel(&mut t, 1.0, 1.0, 1e-12);
        let z = t.var(Mat::row_vec(&[0.3, -0.7])).unwrap();
        let y = t.constant(Mat::scalar(2.0)).unwrap();
        let head = gp_fit(&mut t, z, y, &kernel).unwrap();
        // K = [[σ² + jitter]] = [[1 + 1e-12]], cache ≈ target.
        assert!((t.value(head.cache).scalar_value() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn gp_kernel_diagonal_is_signal_plus_jitter() {
        // Verified through the fitted system: with one support point the
        // cache is target/(σ²+jitter).
        let mut t = Tape::new();
        let kernel = const_kernel(&mut t, 0.7, 2.0, 0.5);
        let z = t.var(Mat::row_vec(&[1.0])).unwrap();
        let y = t.constant(Mat::scalar(5.0)).unwrap();
        let head = gp_fit(&mut t, z, y, &kernel).unwrap();
        assert!((t.value(head.cache).scalar_value() - 5.0 / 2.5).abs() < 1e-12);
    }

    /// Independent dense referee: general LU solve with partial pivoting,
    /// no shared code with the Cholesky path.
    fn lu_solve(a: &Mat, b: &[f64]) -> Vec<f64> {
        let n = a.rows();
        let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        let mut x = b.to_vec();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
                .unwrap();
            m.swap(col, pivot);
            x.swap(col, pivot);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                x[row] -= f * x[col];
            }
        }
        for row in (0..n).rev() {
            for k in row + 1..n {
                x[row] -= m[row][k] * x[k];
            }
            x[row] /= m[row][row];
        }
        x
    }

    #[test]
    fn gp_cache_matches_dense_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z0 = rand_mat(&mut rng, 6, 3);
        let y0 = rand_mat(&mut rng, 6, 1);
        let (ls, sig, jit) = (0.9, 1.3, 1e-4);
        let mut t = Tape::new();
        let kernel = const_kernel(&mut t, ls, sig, jit);
        let z = t.var(z0.clone()).unwrap();
        let y = t.constant(y0.clone()).unwrap();
        let head = gp_fit(&mut t, z, y, &kernel).unwrap();

        // Build the same system with straightforward loops.
        let mut kmat = Mat::zeros(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let d2: f64 = (0..3).map(|c| (z0.get(i, c) - z0.get(j, c)).powi(2)).sum();
                let mut v = sig * (-d2 / (2.0 * ls * ls)).exp();
                if i == j {
                    v += jit;
                }
                kmat.set(i, j, v);
            }
        }
        let oracle = lu_solve(&kmat, y0.data());
        for (got, want) in t.value(head.cache).data().iter().zip(&oracle) {
            assert!((got - want).abs() <= 1e-8, "cache {} vs oracle {}", got, want);
        }
        // Residual of the cached solve against the dense system.
        let resid = kmat
            .matmul(t.value(head.cache))
            .sub(&y0)
            .max_abs();
        assert!(resid <= 1e-8);
    }

    #[test]
    fn gp_interpolates_at_support_with_tiny_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = rand_mat(&mut rng, 5, 3);
        let y0 = rand_mat(&mut rng, 5, 1);
        let mut t = Tape::new();
        let kernel = const_kernel(&mut t, 1.0, 1.0, 1e-12);
        let z = t.var(z0.clone()).unwrap();
        let y = t.constant(y0.clone()).unwrap();
        let head = gp_fit(&mut t, z, y, &kernel).unwrap();
        let pred = gp_predict(&mut t, &head, z).unwrap();
        assert!(t.value(pred).sub(&y0).max_abs() <= 1e-4);
    }

    #[test]
    fn gp_far_queries_revert_to_prior_mean() {
        let mut t = Tape::new();
        let kernel = const_kernel(&mut t, 0.5, 1.0, 1e-6);
        let z = t.var(Mat::from_vec(2, 1, vec![0.0, 1.0])).unwrap();
        let y = t.constant(Mat::col_vec(&[3.0, -2.0])).unwrap();
        let head = gp_fit(&mut t, z, y, &kernel).unwrap();
        let far = t.constant(Mat::scalar(100.0)).unwrap();
        let pred = gp_predict(&mut t, &head, far).unwrap();
        assert!(t.value(pred).scalar_value().abs() < 1e-10);
    }

    #[test]
    fn gp_agrees_with_independent_regression_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let z0 = rand_mat(&mut rng, 6, 2);
            let y0 = rand_mat(&mut rng, 6, 1);
            let zq0 = rand_mat(&mut rng, 4, 2);
            let (ls, sig, jit) = (1.1, 0.8, 1e-3);
            let mut t = Tape::new();
            let kernel = const_kernel(&mut t, ls, sig, jit);
            let z = t.var(z0.clone()).unwrap();
            let y = t.constant(y0.clone()).unwrap();
            let head = gp_fit(&mut t, z, y, &kernel).unwrap();
            let zq = t.constant(zq0.clone()).unwrap();
            let pred = gp_predict(&mut t, &head, zq).unwrap();

            let kern = |a: &[f64], b: &[f64]| {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                sig * (-d2 / (2.0 * ls * ls)).exp()
            };
            let mut kmat = Mat::zeros(6, 6);
            for i in 0..6 {
                for j in 0..6 {
                    let mut v = kern(z0.row(i), z0.row(j));
                    if i == j {
                        v += jit;
                    }
                    kmat.set(i, j, v);
                }
            }
            let alpha = lu_solve(&kmat, y0.data());
            for q in 0..4 {
                let want: f64 = (0..6)
                    .map(|i| kern(zq0.row(q), z0.row(i)) * alpha[i])
                    .sum();
                let got = t.value(pred).get(q, 0);
                assert!(
                    (got - want).abs() <= 1e-8,
                    "seed {} query {}: {} vs {}",
                    seed,
                    q,
                    got,
                    want
                );
            }
        }
    }

    #[test]
    fn gp_gradient_wrt_encodings_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z0 = rand_mat(&mut rng, 4, 3);
        let y0 = rand_mat(&mut rng, 4, 1);
        let zq0 = rand_mat(&mut rng, 2, 3);
        let run = |zm: &Mat| {
            let mut t = Tape::new();
            let kernel = const_kernel(&mut t, 0.9, 1.2, 1e-2);
            let z = t.var(zm.clone()).unwrap();
            let y = t.constant(y0.clone()).unwrap();
            let head = gp_fit(&mut t, z, y, &kernel).unwrap();
            let zq = t.constant(zq0.clone()).unwrap();
            let pred = gp_predict(&mut t, &head, zq).unwrap();
            let sq = t.square(pred).unwrap();
            let loss = t.sum(sq).unwrap();
            (t, z, loss)
        };
        let (t, z, loss) = run(&z0);
        let grads = t.backward(loss).unwrap();
        let fd = central_diff(&z0, 1e-5, |m| {
            let (t, _, loss) = run(m);
            t.value(loss).scalar_value()
        });
        assert!(max_rel_err(&fd, grads.get(z).unwrap()) <= 1e-4);
    }

    #[test]
    fn heads_are_invariant_to_support_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z0 = rand_mat(&mut rng, 6, 3);
        let y0 = rand_mat(&mut rng, 6, 1);
        let zq0 = rand_mat(&mut rng, 3, 3);
        let perm = [4usize, 2, 0, 5, 1, 3];
        let zp = Mat::from_fn(6, 3, |i, j| z0.get(perm[i], j));
        let yp = Mat::from_fn(6, 1, |i, _| y0.get(perm[i], 0));

        let ridge_preds = |zm: &Mat, ym: &Mat| {
            let mut t = Tape::new();
            let z = t.var(zm.clone()).unwrap();
            let y = t.constant(ym.clone()).unwrap();
            let lam = t.scalar_const(0.4).unwrap();
            let head = ridge_fit(&mut t, z, y, lam).unwrap();
            let zq = t.constant(zq0.clone()).unwrap();
            let pred = ridge_predict(&mut t, &head, zq).unwrap();
            t.value(pred).clone()
        };
        assert!(ridge_preds(&z0, &y0).sub(&ridge_preds(&zp, &yp)).max_abs() < 1e-12);

        let gp_preds = |zm: &Mat, ym: &Mat| {
            let mut t = Tape::new();
            let kernel = const_kernel(&mut t, 1.0, 1.0, 1e-3);
            let z = t.var(zm.clone()).unwrap();
            let y = t.constant(ym.clone()).unwrap();
            let head = gp_fit(&mut t, z, y, &kernel).unwrap();
            let zq = t.constant(zq0.clone()).unwrap();
            let pred = gp_predict(&mut t, &head, zq).unwrap();
            t.value(pred).clone()
        };
        assert!(gp_preds(&z0, &y0).sub(&gp_preds(&zp, &yp)).max_abs() < 1e-12);
    }
}
