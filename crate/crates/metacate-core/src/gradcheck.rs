//! Central finite-difference oracles for gradient checking. These are the
//! independent referees for every backward rule: tests freeze tolerances
//! against them instead of trusting the tape.

use crate::mat::Mat;

/// Central-difference gradient of a scalar function at `base`, perturbing
/// every entry by ±h.
pub fn central_diff(base: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut grad = Mat::zeros(base.rows(), base.cols());
    let mut probe = base.clone();
    for i in 0..base.rows() {
        for j in 0..base.cols() {
            let v = base.get(i, j);
            probe.set(i, j, v + h);
            let up = f(&probe);
            probe.set(i, j, v - h);
            let down = f(&probe);
            probe.set(i, j, v);
            grad.set(i, j, (up - down) / (2.0 * h));
        }
    }
    grad
}

/// Central difference for a chosen subset of entries (cheap spot checks on
/// large parameter blocks).
pub fn central_diff_entries(
    base: &Mat,
    entries: &[(usize, usize)],
    h: f64,
    mut f: impl FnMut(&Mat) -> f64,
) -> Vec<f64> {
    let mut probe = base.clone();
    entries
        .iter()
        .map(|&(i, j)| {
            let v = base.get(i, j);
            probe.set(i, j, v + h);
            let up = f(&probe);
            probe.set(i, j, v - h);
            let down = f(&probe);
            probe.set(i, j, v);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Evenly spread sample of entry coordinates for spot-checking a block.
pub fn sample_entries(rows: usize, cols: usize, max_count: usize) -> Vec<(usize, usize)> {
    let total = rows * cols;
    let count = total.min(max_count.max(1));
    (0..count)
        .map(|k| {
            let flat = k * total / count;
            (flat / cols, flat % cols)
        })
        .collect()
}

/// Relative error |a−b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Maximum elementwise relative error between two equal-shape matrices.
pub fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    assert!(a.same_shape(b), "max_rel_err: {:?} vs {:?}", a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
