use super::{Linear, LayerNorm};
use crate::error::{TensorError, TensorResult};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub(crate) struct AttnHead {
    pub(crate) wq: Linear,
    pub(crate) wk: Linear,
    pub(crate) wv: Linear,
}

/// Scaled dot-product attention over 2-D token matrices, one projection
/// triple per head. Queries may come from a different sequence than
/// keys/values (cross-attention); `causal` masks future keys.
pub struct MultiHeadAttention {
    pub(crate) heads: Vec<AttnHead>,
    out: Linear,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize) -> Self {
        assert!(d_model % n_heads == 0, "d_model {d_model} not divisible by {n_heads} heads");
        let head_dim = d_model / n_heads;
        let heads = (0..n_heads)
            .map(|_| AttnHead {
                wq: Linear::new(rng, d_model, head_dim),
                wk: Linear::new(rng, d_model, head_dim),
                wv: Linear::new(rng, d_model, head_dim),
            })
            .collect();
        MultiHeadAttention { heads, out: Linear::new(rng, d_model, d_model), head_dim }
    }

    fn head_probs(&self, head: &AttnHead, q_in: &Tensor, kv_in: &Tensor, causal: bool) -> TensorResult<Tensor> {
        let q = head.wq.forward(q_in)?;
        let k = head.wk.forward(kv_in)?;
        let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (self.head_dim as f32).sqrt());
        let scores = if causal { scores.add(&causal_bias(q_in.shape()[0], kv_in.shape()[0])?)? } else { scores };
        Ok(scores.softmax_last())
    }

    /// `q_in`: [L_q, d], `kv_in`: [L_k, d] -> [L_q, d].
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, causal: bool) -> TensorResult<Tensor> {
        if q_in.shape().len() != 2 || kv_in.shape().len() != 2 {
            return Err(TensorError::BadRank { op: "attention", expected: 2, got: q_in.shape().to_vec() });
        }
        let mut parts = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let probs = self.head_probs(head, q_in, kv_in, causal)?;
            parts.push(probs.matmul(&head.wv.forward(kv_in)?)?);
        }
        self.out.forward(&Tensor::concat(&parts, 1)?)
    }

    /// Per-head attention matrices [L_q, L_k], recomputed from the inputs.
    pub fn attention_probs(&self, q_in: &Tensor, kv_in: &Tensor, causal: bool) -> TensorResult<Vec<Tensor>> {
        self.heads.iter().map(|h| self.head_probs(h, q_in, kv_in, causal)).collect()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        for h in &self.heads {
            ps.extend(h.wq.params());
            ps.extend(h.wk.params());
            ps.extend(h.wv.params());
        }
        ps.extend(self.out.params());
        ps
    }
}

fn causal_bias(l_q: usize, l_k: usize) -> TensorResult<Tensor> {
    let mut data = vec![0.0f32; l_q * l_k];
    for i in 0..l_q {
        for j in 0..l_k {
            if j > i {
                data[i * l_k + j] = -1e9;
            }
        }
    }
    Tensor::from_vec(data, &[l_q, l_k])
}

/// Pre-norm self-attention block: attention and a two-layer feed-forward,
/// each behind a residual connection.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(rng, d_model, n_heads),
            ln2: LayerNorm::new(d_model),
            fc1: Linear::new(rng, d_model, 2 * d_model),
            fc2: Linear::new(rng, 2 * d_model, d_model),
        }
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> TensorResult<Tensor> {
        let n = self.ln1.forward(x)?;
        let x = x.add(&self.attn.forward(&n, &n, causal)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.silu()?)?;
        x.add(&h)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn normed_input(&self, x: &Tensor) -> TensorResult<Tensor> {
        self.ln1.forward(x)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = self.ln1.params();
        ps.extend(self.attn.params());
        ps.extend(self.ln2.params());
        ps.extend(self.fc1.params());
        ps.extend(self.fc2.params());
        ps
    }
}

/// Cross-attention block whose entire correction rides in one residual
/// branch: `x + MLP(Attn(LN(x), kv))`. With zero biases and an all-zero kv
/// sequence the branch evaluates to exactly zero, so the block is an exact
/// identity; that limit is the closed-gate contract of the fusion gate.
pub struct CrossGateBlock {
    ln: LayerNorm,
    attn: MultiHeadAttention,
    fc1: Linear,
    fc2: Linear,
}

impl CrossGateBlock {
    /// The output projection starts near zero, so a fresh block is almost an
    /// identity in residual use: the side tokens cannot destabilize the
    /// carry-through until the block has learned a useful correction.
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, n_heads: usize) -> Self {
        CrossGateBlock {
            ln: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(rng, d_model, n_heads),
            fc1: Linear::new(rng, d_model, 2 * d_model),
            fc2: Linear::with_std(rng, 2 * d_model, d_model, 0.01),
        }
    }

    /// `x`: [L_q, d] queries, `kv`: [L_k, d] side tokens.
    pub fn forward(&self, x: &Tensor, kv: &Tensor) -> TensorResult<Tensor> {
        x.add(&self.branch(x, kv)?)
    }

    /// The correction branch alone, without the carry-through.
    pub fn branch(&self, x: &Tensor, kv: &Tensor) -> TensorResult<Tensor> {
        let a = self.attn.forward(&self.ln.forward(x)?, kv, false)?;
        self.fc2.forward(&self.fc1.forward(&a)?.silu()?)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn normed_input(&self, x: &Tensor) -> TensorResult<Tensor> {
        self.ln.forward(x)
    }

    /// All bias vectors in the block (attention projections and MLP).
    pub fn biases(&self) -> Vec<Tensor> {
        let mut bs = Vec::new();
        for h in &self.attn.heads {
            bs.push(h.wq.bias.clone());
            bs.push(h.wk.bias.clone());
            bs.push(h.wv.bias.clone());
        }
        bs.push(self.attn.out.bias.clone());
        bs.push(self.fc1.bias.clone());
        bs.push(self.fc2.bias.clone());
        bs
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = self.ln.params();
        ps.extend(self.attn.params());
        ps.extend(self.fc1.params());
        ps.extend(self.fc2.params());
        ps
    }
}
