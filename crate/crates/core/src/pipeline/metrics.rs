//! Reconstruction quality metrics over [B, C, H, W] images in [0, 1].

use crate::error::{TensorError, TensorResult};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    same_shape("mse", a, b)?;
    let av = a.to_vec();
    let bv = b.to_vec();
    let sum: f64 = av.iter().zip(&bv).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    Ok(sum / av.len() as f64)
}

/// 10 log10(1 / MSE) for unit-range images, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    let e = mse(a, b)?;
    if e < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / e).log10())
}

const WINDOW: usize = 7;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const SCALES: usize = 3;
// the first three of the standard five-scale weights, renormalized
const RAW_WEIGHTS: [f64; SCALES] = [0.0448, 0.2856, 0.3001];

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(WINDOW * WINDOW);
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            w.push((-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

struct Plane {
    data: Vec<f64>,
    h: usize,
    w: usize,
}

impl Plane {
    fn downsample(&self) -> Plane {
        let (h2, w2) = (self.h / 2, self.w / 2);
        let mut out = vec![0.0; h2 * w2];
        for y in 0..h2 {
            for x in 0..w2 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += self.data[(2 * y + dy) * self.w + 2 * x + dx];
                    }
                }
                out[y * w2 + x] = s / 4.0;
            }
        }
        Plane { data: out, h: h2, w: w2 }
    }
}

/// Mean luminance term and mean contrast-structure term over all valid
/// window positions of one plane pair.
fn ssim_terms(a: &Plane, b: &Plane, win: &[f64]) -> (f64, f64) {
    let (oh, ow) = (a.h - WINDOW + 1, a.w - WINDOW + 1);
    let mut lum = 0.0;
    let mut cs = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..WINDOW {
                for wx in 0..WINDOW {
                    let k = win[wy * WINDOW + wx];
                    let va = a.data[(y + wy) * a.w + x + wx];
                    let vb = b.data[(y + wy) * b.w + x + wx];
                    ma += k * va;
                    mb += k * vb;
                    aa += k * va * va;
                    bb += k * vb * vb;
                    ab += k * va * vb;
                }
            }
            let var_a = aa - ma * ma;
            let var_b = bb - mb * mb;
            let cov = ab - ma * mb;
            lum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
            cs += (2.0 * cov + C2) / (var_a + var_b + C2);
        }
    }
    let n = (oh * ow) as f64;
    (lum / n, cs / n)
}

fn planes(t: &Tensor) -> Vec<Plane> {
    let s = t.shape().to_vec();
    let (n, h, w) = (s[0] * s[1], s[2], s[3]);
    let data = t.to_vec();
    (0..n)
        .map(|i| Plane { data: data[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f64).collect(), h, w })
        .collect()
}

/// Three-scale MS-SSIM with a 7x7 Gaussian window (sigma 1.5); the standard
/// five-scale exponents are renormalized over the three scales that fit a
/// 32-pixel image.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    same_shape("ms_ssim", a, b)?;
    let s = a.shape().to_vec();
    if s.len() != 4 {
        return Err(TensorError::BadRank { op: "ms_ssim", expected: 4, got: s });
    }
    let min_side = WINDOW << (SCALES - 1);
    if s[2] < min_side || s[3] < min_side {
        return Err(TensorError::Invalid {
            op: "ms_ssim",
            what: format!("image {}x{} too small for {SCALES} scales of a {WINDOW}-tap window", s[2], s[3]),
        });
    }
    let weight_sum: f64 = RAW_WEIGHTS.iter().sum();
    let win = gaussian_window();
    let mut pa = planes(a);
    let mut pb = planes(b);
    let mut score = 1.0f64;
    for scale in 0..SCALES {
        let mut lum = 0.0;
        let mut cs = 0.0;
        for (x, y) in pa.iter().zip(&pb) {
            let (l, c) = ssim_terms(x, y, &win);
            lum += l;
            cs += c;
        }
        let n = pa.len() as f64;
        let (lum, cs) = (lum / n, cs / n);
        let term = if scale == SCALES - 1 { lum * cs } else { cs };
        score *= term.max(0.0).powf(RAW_WEIGHTS[scale] / weight_sum);
        if scale + 1 < SCALES {
            pa = pa.iter().map(Plane::downsample).collect();
            pb = pb.iter().map(Plane::downsample).collect();
        }
    }
    Ok(score)
}
