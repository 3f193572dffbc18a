//! mdic: desk-scale distributed image compression with a diffusion decoder.
//!
//! The encoder transmits a vector-quantized latent of the primary view at a
//! very low bitrate. The decoder holds a correlated side view that was never
//! transmitted; it re-derives side latents, gates them through a learned
//! binary relevance mask, and feeds the result as conditioning into a small
//! denoising-diffusion model that reconstructs the primary image.
//!
//! Layering, bottom to top:
//!
//! ```text
//!   tensor     reverse-mode autodiff over f32 buffers
//!   nets       conv / attention building blocks, tiny autoencoder,
//!              latent aligners, text encoder
//!   vq         vector quantizer with straight-through estimator
//!   mask       Gumbel-sigmoid relevance mask + masked-noun auxiliary task
//!   gates      mask-gated fusion of side information (category + detail)
//!   diffusion  noise schedule, conditional denoiser, ancestral sampler
//!   coding     autoregressive symbol model, range coder, bitstream container
//!   pipeline   synthetic scenes, training loop, codec, metrics, RD sweeps
//! ```

pub mod coding;
pub mod diffusion;
pub mod error;
pub mod gates;
pub mod mask;
pub mod nets;
pub mod oracle;
pub mod pipeline;
pub mod tensor;
pub mod vq;

pub use error::{CodecError, PipelineError, TensorError};
pub use tensor::Tensor;
