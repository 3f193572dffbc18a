//! Network building blocks: linear/conv layers, layer norm, attention, and
//! the three small backbones (image autoencoder, latent aligner, text encoder).
//!
//! Every layer owns its parameters as tensor leaves and exposes them through
//! `params()` so the optimizer and the checkpointer can walk a flat list.
//! Construction takes an explicit rng; the same seed yields bit-identical
//! parameters.

mod attention;
mod encoders;

pub use attention::{CrossGateBlock, MultiHeadAttention, TransformerBlock};
pub use encoders::{LatentAligner, TextEncoder, TinyAutoencoder, LATENT_CHANNELS};

use crate::error::TensorResult;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n).map(|_| { let v: f32 = StandardNormal.sample(rng); v * std }).collect()
}

pub struct Linear {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        Self::with_std(rng, d_in, d_out, (1.0 / d_in as f32).sqrt())
    }

    pub fn with_std(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, std: f32) -> Self {
        Linear {
            weight: Tensor::param(normal_vec(rng, d_in * d_out, std), &[d_in, d_out]).unwrap(),
            bias: Tensor::param(vec![0.0; d_out], &[d_out]).unwrap(),
        }
    }

    /// `x`: [rows, d_in] -> [rows, d_out].
    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

pub struct Conv2dLayer {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let std = (2.0 / (c_in * k * k) as f32).sqrt();
        Conv2dLayer {
            weight: Tensor::param(normal_vec(rng, c_out * c_in * k * k, std), &[c_out, c_in, k, k]).unwrap(),
            bias: Tensor::param(vec![0.0; c_out], &[c_out, 1, 1]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.conv2d(&self.weight, self.stride, self.pad)?.add(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

pub struct ConvTranspose2dLayer {
    pub(crate) weight: Tensor,
    pub(crate) bias: Tensor,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2dLayer {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let std = (2.0 / (c_in * k * k) as f32).sqrt();
        ConvTranspose2dLayer {
            weight: Tensor::param(normal_vec(rng, c_in * c_out * k * k, std), &[c_in, c_out, k, k]).unwrap(),
            bias: Tensor::param(vec![0.0; c_out], &[c_out, 1, 1]).unwrap(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.conv_transpose2d(&self.weight, self.stride, self.pad)?.add(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Normalizes the last dimension to zero mean and unit variance, then applies
/// a learned per-feature gain and bias.
pub struct LayerNorm {
    pub(crate) gain: Tensor,
    pub(crate) bias: Tensor,
    eps: f32,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(vec![1.0; d], &[d]).unwrap(),
            bias: Tensor::param(vec![0.0; d], &[d]).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> TensorResult<Tensor> {
        x.normalize_last(self.eps).mul(&self.gain)?.add(&self.bias)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}
