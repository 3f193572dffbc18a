//! Vector quantization of latent grids against a learned codebook.
//!
//! Quantization is the compression bottleneck: each spatial position of a
//! [B, D, H, W] latent is snapped to its nearest codeword and transmitted as
//! an index. The straight-through view keeps the encoder trainable through
//! the discrete assignment, and the two-term loss pulls codewords toward the
//! encoder output while committing the encoder to its assigned codeword.

use crate::error::{PipelineError, PipelineResult, TensorError, TensorResult};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

pub struct Codebook {
    pub entries: Tensor,
    k: usize,
    d: usize,
    dead_after: u64,
    idle_steps: RefCell<Vec<u64>>,
}

pub struct QuantizedLatent {
    /// Row-major [B, H, W] assignment indices.
    pub indices: Vec<usize>,
    /// (B, H, W) of the quantized grid.
    pub grid: (usize, usize, usize),
    /// [B, D, H, W]; differentiable toward the codebook entries.
    pub quantized: Tensor,
    /// Forward equals `quantized`, backward routes gradients to the
    /// pre-quantized latent unchanged.
    pub straight_through: Tensor,
}

impl Codebook {
    pub fn new(entries: Vec<f32>, k: usize, d: usize) -> Self {
        Codebook {
            entries: Tensor::param(entries, &[k, d]).unwrap(),
            k,
            d,
            dead_after: 500,
            idle_steps: RefCell::new(vec![0; k]),
        }
    }

    /// k-means++-style seeding from a pool of latent vectors (flat, stride
    /// `d`). Requires at least `k` distinct vectors.
    pub fn init(rng: &mut ChaCha8Rng, k: usize, d: usize, pool: &[f32]) -> PipelineResult<Self> {
        assert!(pool.len() % d == 0);
        let n = pool.len() / d;
        let vecs: Vec<&[f32]> = pool.chunks(d).collect();
        let mut distinct: Vec<&[f32]> = Vec::new();
        for v in &vecs {
            if !distinct.iter().any(|u| u == v) {
                distinct.push(v);
            }
        }
        if distinct.len() < k {
            return Err(PipelineError::Data(format!(
                "codebook needs {k} distinct latent vectors, pool has {}",
                distinct.len()
            )));
        }
        let mut chosen: Vec<usize> = vec![rng.gen_range(0..n)];
        let mut min_d2 = vec![f32::INFINITY; n];
        while chosen.len() < k {
            let last = &vecs[*chosen.last().unwrap()];
            for i in 0..n {
                let d2: f32 = vecs[i].iter().zip(last.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < min_d2[i] {
                    min_d2[i] = d2;
                }
            }
            let total: f32 = min_d2.iter().sum();
            let mut draw = rng.gen_range(0.0..total.max(f32::MIN_POSITIVE));
            let mut pick = n - 1;
            for i in 0..n {
                if min_d2[i] <= 0.0 {
                    continue;
                }
                if draw < min_d2[i] {
                    pick = i;
                    break;
                }
                draw -= min_d2[i];
            }
            chosen.push(pick);
        }
        let mut entries = Vec::with_capacity(k * d);
        for &i in &chosen {
            entries.extend_from_slice(vecs[i]);
        }
        Ok(Codebook::new(entries, k, d))
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn set_dead_after(&mut self, steps: u64) {
        self.dead_after = steps;
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.entries.clone()]
    }

    /// Nearest codeword per spatial position; ties keep the lowest index.
    pub fn quantize(&self, z: &Tensor) -> TensorResult<QuantizedLatent> {
        let s = z.shape();
        if s.len() != 4 {
            return Err(TensorError::BadRank { op: "quantize", expected: 4, got: s.to_vec() });
        }
        if s[1] != self.d {
            return Err(TensorError::Invalid {
                op: "quantize",
                what: format!("latent has {} channels, codebook dimension is {}", s[1], self.d),
            });
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let data = z.data();
        let book = self.entries.data();
        let mut indices = Vec::with_capacity(b * h * w);
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut best = 0usize;
                    let mut best_d = f32::INFINITY;
                    for kk in 0..self.k {
                        let mut d2 = 0.0f32;
                        for c in 0..self.d {
                            let zv = data[((bi * self.d + c) * h + i) * w + j];
                            let diff = zv - book[kk * self.d + c];
                            d2 += diff * diff;
                        }
                        if d2 < best_d {
                            best_d = d2;
                            best = kk;
                        }
                    }
                    indices.push(best);
                }
            }
        }
        drop(data);
        drop(book);
        let quantized = self
            .entries
            .gather_rows(&indices)?
            .reshape(&[b, h, w, self.d])?
            .permute(&[0, 3, 1, 2])?;
        let straight_through = z.straight_through(quantized.to_vec())?;
        Ok(QuantizedLatent { indices, grid: (b, h, w), quantized, straight_through })
    }

    /// Rebuilds the differentiable quantized tensor from stored indices
    /// (decoder side, no pre-quantized latent available).
    pub fn lookup(&self, indices: &[usize], grid: (usize, usize, usize)) -> TensorResult<Tensor> {
        let (b, h, w) = grid;
        if indices.len() != b * h * w {
            return Err(TensorError::Invalid {
                op: "lookup",
                what: format!("{} indices for a {}x{}x{} grid", indices.len(), b, h, w),
            });
        }
        self.entries.gather_rows(indices)?.reshape(&[b, h, w, self.d])?.permute(&[0, 3, 1, 2])
    }

    /// Marks the listed codewords as live and ages the rest; codewords idle
    /// for `dead_after` consecutive steps are re-seeded from `pool` (flat
    /// vectors, stride `d`). Returns how many were re-seeded.
    pub fn refresh_dead(&self, live: &[usize], pool: &[f32], rng: &mut ChaCha8Rng) -> usize {
        let mut idle = self.idle_steps.borrow_mut();
        let mut used = vec![false; self.k];
        for &i in live {
            used[i] = true;
        }
        for (k, u) in used.iter().enumerate() {
            idle[k] = if *u { 0 } else { idle[k] + 1 };
        }
        let n = pool.len() / self.d;
        if n == 0 {
            return 0;
        }
        let mut entries = self.entries.to_vec();
        let mut reseeded = 0;
        for k in 0..self.k {
            if idle[k] >= self.dead_after {
                let src = rng.gen_range(0..n);
                entries[k * self.d..(k + 1) * self.d]
                    .copy_from_slice(&pool[src * self.d..(src + 1) * self.d]);
                idle[k] = 0;
                reseeded += 1;
            }
        }
        if reseeded > 0 {
            self.entries.set_data(&entries);
        }
        reseeded
    }
}

/// Pulls codewords toward the (frozen) encoder output. Gradients reach only
/// the codebook.
pub fn codebook_term(z: &Tensor, q: &QuantizedLatent) -> TensorResult<Tensor> {
    let positions = (q.grid.0 * q.grid.1 * q.grid.2) as f32;
    let d = z.stop_gradient().sub(&q.quantized)?;
    Ok(d.mul(&d)?.sum_all().scale(1.0 / positions))
}

/// Commits the encoder output to its (frozen) assigned codeword. Gradients
/// reach only the pre-quantized latent.
pub fn commitment_term(z: &Tensor, q: &QuantizedLatent) -> TensorResult<Tensor> {
    let positions = (q.grid.0 * q.grid.1 * q.grid.2) as f32;
    let d = q.quantized.stop_gradient().sub(z)?;
    Ok(d.mul(&d)?.sum_all().scale(1.0 / positions))
}

/// Symmetric two-term quantization loss, mean over spatial positions.
pub fn vq_loss(z: &Tensor, q: &QuantizedLatent) -> TensorResult<Tensor> {
    codebook_term(z, q)?.add(&commitment_term(z, q)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::nearest_brute_force;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_latent(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn exact_codeword_gets_its_own_index() {
        let entries: Vec<f32> = (0..8 * 4).map(|i| i as f32 * 0.1).collect();
        let cb = Codebook::new(entries.clone(), 8, 4);
        let v = &entries[3 * 4..4 * 4];
        let z = Tensor::from_vec(v.to_vec(), &[1, 4, 1, 1]).unwrap();
        let q = cb.quantize(&z).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.quantized.to_vec(), v);
    }

    #[test]
    fn indices_match_brute_force_oracle() {
        let mut r = rng(1);
        let entries: Vec<f32> = (0..8 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(entries.clone(), 8, 4);
        let z = random_latent(&mut r, &[2, 4, 3, 3]);
        let q = cb.quantize(&z).unwrap();
        let data = z.to_vec();
        let mut pos = 0;
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let v: Vec<f32> = (0..4).map(|c| data[((b * 4 + c) * 3 + i) * 3 + j]).collect();
                    assert_eq!(q.indices[pos], nearest_brute_force(&v, &entries, 4));
                    pos += 1;
                }
            }
        }
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        // Entries 2 and 5 are equidistant from the query; everything else is far.
        let mut entries = vec![9.0f32; 8 * 2];
        entries[2 * 2] = 1.0;
        entries[2 * 2 + 1] = 0.0;
        entries[5 * 2] = -1.0;
        entries[5 * 2 + 1] = 0.0;
        let cb = Codebook::new(entries, 8, 2);
        let z = Tensor::from_vec(vec![0.0, 0.0], &[1, 2, 1, 1]).unwrap();
        assert_eq!(cb.quantize(&z).unwrap().indices, vec![2]);
    }

    #[test]
    fn quantized_rows_equal_codebook_entries_exactly() {
        let mut r = rng(2);
        let entries: Vec<f32> = (0..6 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(entries.clone(), 6, 3);
        let z = random_latent(&mut r, &[1, 3, 2, 2]);
        let q = cb.quantize(&z).unwrap();
        let qd = q.quantized.to_vec();
        for (pos, &idx) in q.indices.iter().enumerate() {
            let (i, j) = (pos / 2, pos % 2);
            for c in 0..3 {
                assert_eq!(qd[(c * 2 + i) * 2 + j], entries[idx * 3 + c]);
            }
        }
    }

    #[test]
    fn quantization_is_idempotent() {
        let mut r = rng(3);
        let entries: Vec<f32> = (0..8 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(entries, 8, 4);
        let z = random_latent(&mut r, &[2, 4, 4, 4]);
        let q1 = cb.quantize(&z).unwrap();
        let q2 = cb.quantize(&q1.quantized).unwrap();
        assert_eq!(q1.indices, q2.indices);
    }

    #[test]
    fn straight_through_routes_gradient_to_latent() {
        let mut r = rng(4);
        let entries: Vec<f32> = (0..4 * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(entries, 4, 2);
        let z = Tensor::param(vec![0.3, -0.2, 0.5, 0.1], &[1, 2, 1, 2]).unwrap();
        let q = cb.quantize(&z).unwrap();
        let w = Tensor::from_vec(vec![2.0, 3.0, 5.0, 7.0], &[1, 2, 1, 2]).unwrap();
        q.straight_through.mul(&w).unwrap().sum_all().backward().unwrap();
        // Pass-through: the latent sees exactly the downstream gradient.
        assert_eq!(z.grad().unwrap(), vec![2.0, 3.0, 5.0, 7.0]);
        // And the codebook sees none of it.
        assert!(cb.entries.grad().is_none());
    }

    #[test]
    fn loss_is_zero_on_codewords_and_quadratic_off_them() {
        let entries = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -3.0, 0.0, 0.0, 0.0];
        let cb = Codebook::new(entries, 3, 4);
        let on = Tensor::param(vec![0.0, 1.0, 0.0, 0.0], &[1, 4, 1, 1]).unwrap();
        let q = cb.quantize(&on).unwrap();
        assert_eq!(vq_loss(&on, &q).unwrap().item(), 0.0);
        // Offset by 0.3 along a unit direction: loss = 2 * 0.3^2.
        let off = Tensor::param(vec![0.0, 1.0, 0.3, 0.0], &[1, 4, 1, 1]).unwrap();
        let q = cb.quantize(&off).unwrap();
        assert_eq!(q.indices, vec![1]);
        let l = vq_loss(&off, &q).unwrap().item();
        assert!((l - 0.18).abs() < 1e-6, "{l}");
    }

    #[test]
    fn loss_terms_route_gradients_to_disjoint_parameters() {
        let mut r = rng(5);
        let entries: Vec<f32> = (0..4 * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(entries, 4, 2);
        let z = Tensor::param(vec![0.4, -0.1, 0.2, 0.9], &[1, 2, 1, 2]).unwrap();

        let q = cb.quantize(&z).unwrap();
        codebook_term(&z, &q).unwrap().backward().unwrap();
        assert!(z.grad().is_none(), "codebook term leaked into the encoder path");
        let cb_grad = cb.entries.grad().unwrap();
        assert!(cb_grad.iter().any(|&g| g != 0.0));

        cb.entries.zero_grad();
        let q = cb.quantize(&z).unwrap();
        commitment_term(&z, &q).unwrap().backward().unwrap();
        assert!(z.grad().is_some());
        let cb_grad = cb.entries.grad().unwrap();
        assert!(cb_grad.iter().all(|&g| g == 0.0), "commitment term leaked into the codebook");
    }

    #[test]
    fn init_uses_exactly_the_distinct_pool_when_sizes_match() {
        let pool = vec![
            0.0, 0.0, //
            1.0, 0.0, //
            0.0, 1.0, //
            1.0, 1.0,
        ];
        let cb = Codebook::init(&mut rng(6), 4, 2, &pool).unwrap();
        let entries = cb.entries.to_vec();
        let mut found = [false; 4];
        for row in entries.chunks(2) {
            for (i, cand) in pool.chunks(2).enumerate() {
                if row == cand {
                    found[i] = true;
                }
            }
        }
        assert!(found.iter().all(|&f| f), "entries {entries:?} miss pool vectors");
    }

    #[test]
    fn init_rejects_insufficiently_distinct_pools() {
        let pool = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        assert!(Codebook::init(&mut rng(7), 3, 2, &pool).is_err());
    }

    #[test]
    fn init_is_deterministic_and_spread_out() {
        let mut r = rng(8);
        let pool: Vec<f32> = (0..64 * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let a = Codebook::init(&mut rng(9), 16, 4, &pool).unwrap().entries.to_vec();
        let b = Codebook::init(&mut rng(9), 16, 4, &pool).unwrap().entries.to_vec();
        assert_eq!(a, b);
        for (i, u) in a.chunks(4).enumerate() {
            for v in a.chunks(4).skip(i + 1) {
                let d2: f32 = u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum();
                assert!(d2 > 0.0, "duplicate codewords after init");
            }
        }
    }

    #[test]
    fn idle_codewords_are_reseeded() {
        let entries = vec![0.0, 0.0, 5.0, 5.0, 9.0, 9.0];
        let mut cb = Codebook::new(entries, 3, 2);
        cb.set_dead_after(3);
        let z = Tensor::from_vec(vec![0.1, 0.1], &[1, 2, 1, 1]).unwrap();
        let pool = vec![0.25, 0.25];
        let mut r = rng(10);
        for step in 0..3 {
            let q = cb.quantize(&z).unwrap();
            assert_eq!(q.indices, vec![0]);
            let n = cb.refresh_dead(&q.indices, &pool, &mut r);
            if step < 2 {
                assert_eq!(n, 0);
            } else {
                assert_eq!(n, 2, "both idle codewords should reseed");
            }
        }
        let after = cb.entries.to_vec();
        assert_eq!(&after[2..4], &[0.25, 0.25]);
        assert_eq!(&after[4..6], &[0.25, 0.25]);
        assert_eq!(&after[0..2], &[0.0, 0.0]);
    }
}
