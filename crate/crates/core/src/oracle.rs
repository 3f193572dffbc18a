//! Independent checking machinery: central finite differences for gradients,
//! brute-force nearest neighbour for the quantizer, and closed-form
//! references. Nothing in here shares code with the implementations it
//! checks; the test suites and the CLI `selftest` both lean on it.

use crate::error::TensorResult;
use crate::tensor::Tensor;

/// Central finite-difference gradient of `f` with respect to `param`,
/// perturbing one coordinate at a time. `f` must rebuild its forward pass
/// from the live parameter values on every call. Differences are taken in
/// `f64`, and the actually-realized step (after `f32` rounding of the
/// perturbed coordinates) is used as the divisor.
pub fn finite_diff_grad(
    param: &Tensor,
    h: f64,
    mut f: impl FnMut() -> TensorResult<Tensor>,
) -> TensorResult<Vec<f64>> {
    let base = param.to_vec();
    let mut grad = vec![0.0f64; base.len()];
    for i in 0..base.len() {
        let xp = (base[i] as f64 + h) as f32;
        let xm = (base[i] as f64 - h) as f32;

        let mut bumped = base.clone();
        bumped[i] = xp;
        param.set_data(&bumped);
        let fp = f()?.item() as f64;

        bumped[i] = xm;
        param.set_data(&bumped);
        let fm = f()?.item() as f64;

        grad[i] = (fp - fm) / (xp as f64 - xm as f64);
    }
    param.set_data(&base);
    Ok(grad)
}

/// Worst per-coordinate error of `got` against `reference`, scaled by the
/// largest reference magnitude (floored at `scale_floor` so near-zero
/// gradients are compared absolutely).
pub fn max_scaled_error(got: &[f32], reference: &[f64], scale_floor: f64) -> f64 {
    assert_eq!(got.len(), reference.len(), "gradient length mismatch");
    let scale = reference
        .iter()
        .map(|v| v.abs())
        .fold(scale_floor, f64::max);
    got.iter()
        .zip(reference)
        .map(|(&g, &r)| (g as f64 - r).abs() / scale)
        .fold(0.0, f64::max)
}

/// Exhaustive nearest-codeword search with the tie rule spelled out:
/// strictly smaller squared distance wins, so equal distances keep the
/// lowest index.
pub fn nearest_brute_force(v: &[f32], codebook: &[f32], dim: usize) -> usize {
    assert_eq!(v.len(), dim);
    assert_eq!(codebook.len() % dim, 0);
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (idx, entry) in codebook.chunks(dim).enumerate() {
        let d: f32 = v.iter().zip(entry).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    best
}

/// Cross-entropy of a uniform distribution over `n` outcomes, in nats.
pub fn uniform_cross_entropy(n: usize) -> f64 {
    (n as f64).ln()
}

/// Mean and variance of a sample, accumulated in f64.
pub fn sample_moments(xs: &[f32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
