//! Side-information gates.
//!
//! The category gate cross-attends from the transmitted quantized latent to
//! the mask-gated quantized side latent, restoring object-level content that
//! quantization destroyed. The detail gate adds a bounded modulation from
//! the unquantized side latent wherever the mask is open. Both reduce to
//! exact identities when the mask is closed, which is what makes the mask a
//! real information valve rather than a soft hint.

use crate::error::{TensorError, TensorResult};
use crate::nets::CrossGateBlock;
use crate::nets::Conv2dLayer;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Cross-attention fusion of quantized side information into the quantized
/// main latent (two blocks). With `residual` the input rides through and the
/// blocks learn corrections; without it the blocks' branch output stands
/// alone.
pub struct CategoryGate {
    blocks: Vec<CrossGateBlock>,
    pub residual: bool,
    d: usize,
}

impl CategoryGate {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, depth: usize) -> Self {
        CategoryGate {
            blocks: (0..depth).map(|_| CrossGateBlock::new(rng, d, n_heads)).collect(),
            residual: true,
            d,
        }
    }

    fn tokens(&self, z: &Tensor) -> TensorResult<Vec<Tensor>> {
        let s = z.shape().to_vec();
        let hw = s[2] * s[3];
        let flat = z.reshape(&[s[0], self.d * hw])?;
        (0..s[0])
            .map(|b| flat.gather_rows(&[b])?.reshape(&[self.d, hw])?.transpose())
            .collect()
    }

    /// `z_hat_x`, `masked_side`: [B, D, H, W] -> fused latent of the same shape.
    pub fn forward(&self, z_hat_x: &Tensor, masked_side: &Tensor) -> TensorResult<Tensor> {
        let s = z_hat_x.shape().to_vec();
        if s != masked_side.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "category_gate",
                lhs: s,
                rhs: masked_side.shape().to_vec(),
            });
        }
        let queries = self.tokens(z_hat_x)?;
        let sides = self.tokens(masked_side)?;
        let mut per_batch = Vec::with_capacity(queries.len());
        for (q, kv) in queries.into_iter().zip(sides) {
            let mut x = q;
            for block in &self.blocks {
                x = if self.residual {
                    block.forward(&x, &kv)?
                } else {
                    block.branch(&x, &kv)?
                };
            }
            per_batch.push(x.transpose()?.reshape(&[1, self.d, s[2], s[3]])?);
        }
        Tensor::concat(&per_batch, 0)
    }

    /// Attention matrices of every block for the first batch element, for
    /// inspection: rows are main-latent positions, columns side positions.
    pub fn attention_rows(&self, z_hat_x: &Tensor, masked_side: &Tensor) -> TensorResult<Vec<Tensor>> {
        let q = self.tokens(z_hat_x)?.remove(0);
        let kv = self.tokens(masked_side)?.remove(0);
        let mut out = Vec::new();
        let mut x = q;
        for block in &self.blocks {
            out.extend(block.attention().attention_probs(&block.normed_input(&x)?, &kv, false)?);
            x = if self.residual { block.forward(&x, &kv)? } else { block.branch(&x, &kv)? };
        }
        Ok(out)
    }

    /// All bias vectors across the blocks (zeroing them makes the closed
    /// gate an exact identity).
    pub fn biases(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|b| b.biases()).collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}

/// Two-conv gate field over the unquantized side latent, sigmoid-bounded to
/// [0,1], injected additively where the mask is open.
pub struct DetailGate {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl DetailGate {
    /// The gate field starts near zero (sigmoid bias -3), so an open mask
    /// injects almost nothing until the gate learns what is worth adding.
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let conv1 = Conv2dLayer::new(rng, d, d, 3, 1, 1);
        let conv2 = Conv2dLayer::new(rng, d, d, 3, 1, 1);
        let bias = &conv2.params()[1];
        bias.set_data(&vec![-3.0; bias.numel()]);
        DetailGate { conv1, conv2 }
    }

    pub fn gate_field(&self, z_y: &Tensor) -> TensorResult<Tensor> {
        Ok(self.conv2.forward(&self.conv1.forward(z_y)?.silu()?)?.sigmoid())
    }

    /// z_d = z_y + gate(z_y) ⊙ aligned mask.
    pub fn forward(&self, z_y: &Tensor, m_v: &Tensor) -> TensorResult<Tensor> {
        let s = z_y.shape();
        let aligned = align_mask(m_v, (s[2], s[3]))?;
        z_y.add(&self.gate_field(z_y)?.mul(&aligned)?)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = self.conv1.params();
        ps.extend(self.conv2.params());
        ps
    }
}

/// Nearest-neighbor resample of a mask grid onto a target spatial shape.
/// Identity when the shapes already agree; the lookup is differentiable so
/// mask gradients survive the resample. Values stay exactly binary because
/// no interpolation happens.
pub fn align_mask(m: &Tensor, target: (usize, usize)) -> TensorResult<Tensor> {
    let s = m.shape().to_vec();
    if s.len() != 4 {
        return Err(TensorError::BadRank { op: "align_mask", expected: 4, got: s });
    }
    let (h2, w2) = target;
    if (s[2], s[3]) == (h2, w2) {
        return Ok(m.clone());
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut rows = Vec::with_capacity(b * c * h2 * w2);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h2 {
                let si = i * h / h2;
                for j in 0..w2 {
                    let sj = j * w / w2;
                    rows.push(((bi * c + ci) * h + si) * w + sj);
                }
            }
        }
    }
    m.reshape(&[b * c * h * w, 1])?.gather_rows(&rows)?.reshape(&[b, c, h2, w2])
}
