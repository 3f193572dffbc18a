use super::{Conv2dLayer, ConvTranspose2dLayer, TransformerBlock};
use crate::error::{PipelineError, PipelineResult, TensorError, TensorResult};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Small convolutional autoencoder standing in for a pre-trained image
/// latent model: three stride-2 convolutions down to an 8-channel latent at
/// 1/8 resolution, mirrored by three transposed convolutions back to RGB.
/// The harness pre-trains it on the corpus and then freezes it.
pub struct TinyAutoencoder {
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    enc3: Conv2dLayer,
    dec1: ConvTranspose2dLayer,
    dec2: ConvTranspose2dLayer,
    dec3: ConvTranspose2dLayer,
}

pub const LATENT_CHANNELS: usize = 8;

impl TinyAutoencoder {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        TinyAutoencoder {
            enc1: Conv2dLayer::new(rng, 3, 16, 3, 2, 1),
            enc2: Conv2dLayer::new(rng, 16, 24, 3, 2, 1),
            enc3: Conv2dLayer::new(rng, 24, LATENT_CHANNELS, 3, 2, 1),
            dec1: ConvTranspose2dLayer::new(rng, LATENT_CHANNELS, 24, 4, 2, 1),
            dec2: ConvTranspose2dLayer::new(rng, 24, 16, 4, 2, 1),
            dec3: ConvTranspose2dLayer::new(rng, 16, 3, 4, 2, 1),
        }
    }

    /// `img`: [B, 3, H, W] with H and W divisible by 8 -> [B, 8, H/8, W/8].
    pub fn encode(&self, img: &Tensor) -> TensorResult<Tensor> {
        let s = img.shape();
        if s.len() != 4 {
            return Err(TensorError::BadRank { op: "vae_encode", expected: 4, got: s.to_vec() });
        }
        if s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(TensorError::Invalid {
                op: "vae_encode",
                what: format!("spatial dims {}x{} not divisible by 8", s[2], s[3]),
            });
        }
        let h = self.enc1.forward(img)?.silu()?;
        let h = self.enc2.forward(&h)?.silu()?;
        self.enc3.forward(&h)
    }

    /// `z`: [B, 8, h, w] -> [B, 3, 8h, 8w] with values in [0, 1].
    pub fn decode(&self, z: &Tensor) -> TensorResult<Tensor> {
        let h = self.dec1.forward(z)?.silu()?;
        let h = self.dec2.forward(&h)?.silu()?;
        Ok(self.dec3.forward(&h)?.sigmoid())
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        for layer in [&self.enc1, &self.enc2, &self.enc3] {
            ps.extend(layer.params());
        }
        for layer in [&self.dec1, &self.dec2, &self.dec3] {
            ps.extend(layer.params());
        }
        ps
    }
}

/// Maps an autoencoder latent onto the codebook dimension: three 3x3 convs
/// followed by one self-attention block over the flattened spatial grid.
pub struct LatentAligner {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    block: TransformerBlock,
    d_out: usize,
}

impl LatentAligner {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, d_out: usize, n_heads: usize) -> Self {
        LatentAligner {
            conv1: Conv2dLayer::new(rng, c_in, d_out, 3, 1, 1),
            conv2: Conv2dLayer::new(rng, d_out, d_out, 3, 1, 1),
            conv3: Conv2dLayer::new(rng, d_out, d_out, 3, 1, 1),
            block: TransformerBlock::new(rng, d_out, n_heads),
            d_out,
        }
    }

    /// `z`: [B, c_in, h, w] -> [B, d_out, h, w].
    pub fn forward(&self, z: &Tensor) -> TensorResult<Tensor> {
        let s = z.shape().to_vec();
        let h = self.conv1.forward(z)?.silu()?;
        let h = self.conv2.forward(&h)?.silu()?;
        let h = self.conv3.forward(&h)?;
        let (b, hw) = (s[0], s[2] * s[3]);
        let flat = h.reshape(&[b, self.d_out * hw])?;
        let mut per_batch = Vec::with_capacity(b);
        for i in 0..b {
            let tokens = flat.gather_rows(&[i])?.reshape(&[self.d_out, hw])?.transpose()?;
            let mixed = self.block.forward(&tokens, false)?;
            per_batch.push(mixed.transpose()?.reshape(&[1, self.d_out, s[2], s[3]])?);
        }
        Tensor::concat(&per_batch, 0)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        for layer in [&self.conv1, &self.conv2, &self.conv3] {
            ps.extend(layer.params());
        }
        ps.extend(self.block.params());
        ps
    }
}

/// Token-embedding transformer producing one feature row per caption token.
/// An extra learned row stands in for the empty caption so downstream
/// conditioning always has at least one row.
pub struct TextEncoder {
    token_table: Tensor,
    pos_table: Tensor,
    blocks: Vec<TransformerBlock>,
    vocab_size: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new(rng: &mut ChaCha8Rng, vocab_size: usize, d_text: usize, n_heads: usize, depth: usize, max_len: usize) -> Self {
        let std = (1.0 / d_text as f32).sqrt();
        TextEncoder {
            token_table: Tensor::param(super::normal_vec(rng, (vocab_size + 1) * d_text, std), &[vocab_size + 1, d_text]).unwrap(),
            pos_table: Tensor::param(super::normal_vec(rng, max_len * d_text, std), &[max_len, d_text]).unwrap(),
            blocks: (0..depth).map(|_| TransformerBlock::new(rng, d_text, n_heads)).collect(),
            vocab_size,
            max_len,
        }
    }

    /// `ids` -> [max(len, 1), d_text]; the empty caption maps to the learned
    /// null row.
    pub fn encode(&self, ids: &[usize]) -> PipelineResult<Tensor> {
        for &id in ids {
            if id >= self.vocab_size {
                return Err(PipelineError::OutOfVocabulary { id, size: self.vocab_size });
            }
        }
        let rows: Vec<usize> = if ids.is_empty() { vec![self.vocab_size] } else { ids.to_vec() };
        if rows.len() > self.max_len {
            return Err(PipelineError::Data(format!(
                "caption of {} tokens exceeds the positional table ({})",
                rows.len(),
                self.max_len
            )));
        }
        let tok = self.token_table.gather_rows(&rows)?;
        let pos = self.pos_table.gather_rows(&(0..rows.len()).collect::<Vec<_>>())?;
        let mut x = tok.add(&pos)?;
        for block in &self.blocks {
            x = block.forward(&x, false)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = vec![self.token_table.clone(), self.pos_table.clone()];
        for block in &self.blocks {
            ps.extend(block.params());
        }
        ps
    }
}
