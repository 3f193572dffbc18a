//! Autoregressive context model over quantizer indices.
//!
//! A two-block causal transformer predicts each index from the indices
//! before it in raster order. Training uses the real-valued softmax (the
//! rate term needs gradients); the coder quantizes the same distributions
//! to fixed point, and encoder and decoder stay synchronized because both
//! query the model with the identical running prefix.

use crate::error::{CodecError, PipelineError, PipelineResult};
use crate::nets::{Linear, TransformerBlock};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

pub const MAX_SEQ: usize = 16;
const EMBED: usize = 32;

pub struct EntropyModel {
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    head: Linear,
    k: usize,
}

impl EntropyModel {
    pub fn new(rng: &mut ChaCha8Rng, k: usize) -> Self {
        let std = (1.0 / EMBED as f32).sqrt();
        EntropyModel {
            embed: Tensor::param(crate::nets::normal_vec(rng, (k + 1) * EMBED, std), &[k + 1, EMBED]).unwrap(),
            pos: Tensor::param(crate::nets::normal_vec(rng, MAX_SEQ * EMBED, std), &[MAX_SEQ, EMBED]).unwrap(),
            blocks: vec![TransformerBlock::new(rng, EMBED, 2), TransformerBlock::new(rng, EMBED, 2)],
            // near-zero head so the untrained model is close to uniform
            head: Linear::with_std(rng, EMBED, k, 0.01),
            k,
        }
    }

    pub fn alphabet(&self) -> usize {
        self.k
    }

    fn check(&self, indices: &[usize], extra: usize) -> PipelineResult<()> {
        if indices.len() + extra > MAX_SEQ {
            return Err(PipelineError::Data(format!(
                "sequence of {} exceeds the {MAX_SEQ}-position context window",
                indices.len() + extra
            )));
        }
        for &s in indices {
            if s >= self.k {
                return Err(CodecError::SymbolOutOfRange { symbol: s, alphabet: self.k }.into());
            }
        }
        Ok(())
    }

    /// Teacher-forced logits for every position: row t is the distribution
    /// over symbol t given the start token and symbols 0..t.
    fn forward(&self, prefix: &[usize]) -> PipelineResult<Tensor> {
        let mut rows = Vec::with_capacity(prefix.len() + 1);
        rows.push(self.k);
        rows.extend_from_slice(prefix);
        let pos_rows: Vec<usize> = (0..rows.len()).collect();
        let mut x = self.embed.gather_rows(&rows)?.add(&self.pos.gather_rows(&pos_rows)?)?;
        for b in &self.blocks {
            x = b.forward(&x, true)?;
        }
        Ok(self.head.forward(&x)?)
    }

    /// Next-symbol probabilities after `prefix`, as plain floats.
    pub fn context_probs(&self, prefix: &[usize]) -> PipelineResult<Vec<f32>> {
        self.check(prefix, 1)?;
        let logits = self.forward(prefix)?;
        let flat = logits.softmax_last().to_vec();
        Ok(flat[prefix.len() * self.k..(prefix.len() + 1) * self.k].to_vec())
    }

    /// Log probabilities of each symbol in `indices` under the model, as a
    /// differentiable [n, k] log-softmax tensor (one forward pass).
    pub fn sequence_log_probs(&self, indices: &[usize]) -> PipelineResult<Tensor> {
        self.check(indices, 0)?;
        let logits = self.forward(&indices[..indices.len() - 1])?;
        Ok(logits.log_softmax_last())
    }

    /// Mean negative log likelihood (nats per symbol), differentiable with
    /// respect to the model parameters only.
    pub fn rate_loss(&self, indices: &[usize]) -> PipelineResult<Tensor> {
        if indices.is_empty() {
            return Ok(Tensor::zeros(&[1]));
        }
        let ll = self.sequence_log_probs(indices)?;
        let n = indices.len();
        let mut onehot = vec![0.0f32; n * self.k];
        for (t, &s) in indices.iter().enumerate() {
            onehot[t * self.k + s] = 1.0;
        }
        let mask = Tensor::from_vec(onehot, &[n, self.k])?;
        Ok(ll.mul(&mask)?.sum_all().scale(-1.0 / n as f32))
    }

    /// Ideal code length of the sequence in bits, from real-valued
    /// probabilities.
    pub fn estimate_bits(&self, indices: &[usize]) -> PipelineResult<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let ll = self.sequence_log_probs(indices)?.to_vec();
        let mut nats = 0.0f64;
        for (t, &s) in indices.iter().enumerate() {
            nats -= ll[t * self.k + s] as f64;
        }
        Ok(nats / std::f64::consts::LN_2)
    }

    pub fn estimate_bpp(&self, indices: &[usize], num_pixels: usize) -> PipelineResult<f64> {
        Ok(self.estimate_bits(indices)? / num_pixels as f64)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = vec![self.embed.clone(), self.pos.clone()];
        for b in &self.blocks {
            ps.extend(b.params());
        }
        ps.extend(self.head.params());
        ps
    }
}
