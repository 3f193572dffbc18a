//! Binary visual mask generation with text supervision.
//!
//! The mask generator fuses the quantized main/side latents, pushes the
//! fused features through a small conv stack, and draws a relaxed Bernoulli
//! mask via Gumbel-sigmoid. A straight-through hardening step makes the
//! transmitted mask exactly binary while keeping the soft gradient. The
//! supervision signal comes from a masked-caption task: object nouns in the
//! caption are hidden and a joint text/visual attention stack must recover
//! them from the masked side latent.

use crate::error::{PipelineError, PipelineResult, TensorError, TensorResult};
use crate::nets::{Conv2dLayer, Linear, TextEncoder, TransformerBlock};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub struct VisualMask {
    pub logits: Tensor,
    /// Relaxed mask in (0,1), differentiable.
    pub soft: Tensor,
    /// Exactly binary; backward passes gradients to `soft` unchanged.
    pub hard: Tensor,
}

/// Conv stack producing mask logits from the two quantized latents.
pub struct MaskGenerator {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
    pub tau: f32,
    pub theta: f32,
}

/// Channel-concatenation of the two latents with their elementwise
/// difference magnitude and product: [B, 4D, H, W].
pub fn fuse(z_hat_x: &Tensor, z_hat_y: &Tensor) -> TensorResult<Tensor> {
    let diff = z_hat_x.sub(z_hat_y)?.abs();
    let prod = z_hat_x.mul(z_hat_y)?;
    Tensor::concat(&[z_hat_x.clone(), z_hat_y.clone(), diff, prod], 1)
}

impl MaskGenerator {
    /// The logit bias starts at +1 so a fresh mask is mostly open; a mask
    /// born closed starves every consumer of side information and never
    /// recovers a learning signal.
    pub fn new(rng: &mut ChaCha8Rng, d: usize, tau: f32, theta: f32) -> Self {
        let conv3 = Conv2dLayer::new(rng, d, 1, 3, 1, 1);
        let bias = &conv3.params()[1];
        bias.set_data(&vec![1.0; bias.numel()]);
        MaskGenerator {
            conv1: Conv2dLayer::new(rng, 4 * d, d, 3, 1, 1),
            conv2: Conv2dLayer::new(rng, d, d, 3, 1, 1),
            conv3,
            tau,
            theta,
        }
    }

    pub fn logits(&self, z_hat_x: &Tensor, z_hat_y: &Tensor) -> TensorResult<Tensor> {
        let fused = fuse(z_hat_x, z_hat_y)?;
        let h = self.conv1.forward(&fused)?.relu();
        let h = self.conv2.forward(&h)?.relu();
        self.conv3.forward(&h)
    }

    /// Full mask draw. `noise` is the Gumbel sample for training; `None`
    /// drops the noise term so inference is deterministic.
    pub fn generate(&self, z_hat_x: &Tensor, z_hat_y: &Tensor, noise: Option<&Tensor>) -> TensorResult<VisualMask> {
        let logits = self.logits(z_hat_x, z_hat_y)?;
        let soft = match noise {
            Some(g) => gumbel_sigmoid(&logits, g, self.tau)?,
            None => gumbel_sigmoid(&logits, &Tensor::zeros(&logits.shape().to_vec()), self.tau)?,
        };
        let hard = harden(&soft, self.theta)?;
        Ok(VisualMask { logits, soft, hard })
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = self.conv1.params();
        ps.extend(self.conv2.params());
        ps.extend(self.conv3.params());
        ps
    }
}

fn gumbel_from_uniform(u: f64) -> f32 {
    const EPS: f64 = 1e-10;
    (-((-((u + EPS).ln())) + EPS).ln()) as f32
}

/// I.i.d. standard Gumbel noise.
pub fn sample_gumbel(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| gumbel_from_uniform(rng.gen_range(0.0..1.0))).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Relaxed Bernoulli: sigmoid((logits + g) / tau).
pub fn gumbel_sigmoid(logits: &Tensor, g: &Tensor, tau: f32) -> TensorResult<Tensor> {
    if tau <= 0.0 {
        return Err(TensorError::Invalid { op: "gumbel_sigmoid", what: format!("temperature {tau} must be positive") });
    }
    Ok(logits.add(g)?.scale(1.0 / tau).sigmoid())
}

/// Strict threshold with a straight-through gradient: forward values are
/// exactly 0 or 1, backward matches the soft mask's gradient.
pub fn harden(soft: &Tensor, theta: f32) -> TensorResult<Tensor> {
    let hard: Vec<f32> = soft.data().iter().map(|&m| if m > theta { 1.0 } else { 0.0 }).collect();
    soft.straight_through(hard)
}

/// Object nouns (maskable, ids `0..N`) plus filler words (ids `N..N+E`) and
/// one mask token (id `N+E`). Caption token ids index this table; the text
/// encoder's embedding table has one extra null-caption row after it.
pub struct ObjectVocabulary {
    nouns: Vec<String>,
    fillers: Vec<String>,
}

pub struct MaskedCaption {
    pub masked_ids: Vec<usize>,
    /// Positions in the caption whose noun was hidden.
    pub slots: Vec<usize>,
    /// Ground-truth noun id per slot.
    pub truths: Vec<usize>,
}

impl ObjectVocabulary {
    pub fn new(nouns: Vec<String>, fillers: Vec<String>) -> PipelineResult<Self> {
        let mut seen = std::collections::HashSet::new();
        for w in nouns.iter().chain(fillers.iter()) {
            if w.is_empty() {
                return Err(PipelineError::Vocabulary("empty token".into()));
            }
            if !seen.insert(w.clone()) {
                return Err(PipelineError::Vocabulary(format!("duplicate token {w:?}")));
            }
        }
        if nouns.is_empty() {
            return Err(PipelineError::Vocabulary("no object nouns".into()));
        }
        Ok(ObjectVocabulary { nouns, fillers })
    }

    /// One noun per line; line order defines token ids.
    pub fn from_noun_file(path: &Path, fillers: Vec<String>) -> PipelineResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let nouns: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        Self::new(nouns, fillers)
    }

    pub fn noun_count(&self) -> usize {
        self.nouns.len()
    }

    pub fn mask_id(&self) -> usize {
        self.nouns.len() + self.fillers.len()
    }

    /// Total id count including the mask token.
    pub fn table_size(&self) -> usize {
        self.nouns.len() + self.fillers.len() + 1
    }

    pub fn noun(&self, id: usize) -> Option<&str> {
        self.nouns.get(id).map(|s| s.as_str())
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        if id < self.nouns.len() {
            self.noun(id)
        } else if id < self.mask_id() {
            self.fillers.get(id - self.nouns.len()).map(|s| s.as_str())
        } else if id == self.mask_id() {
            Some("<mask>")
        } else {
            None
        }
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.nouns
            .iter()
            .chain(self.fillers.iter())
            .position(|w| w == word)
    }

    /// Replaces every object-noun token with the mask token; filler tokens
    /// pass through. Deterministic in the caption.
    pub fn mask_caption(&self, caption: &[usize]) -> PipelineResult<MaskedCaption> {
        let n = self.nouns.len();
        let mut masked_ids = Vec::with_capacity(caption.len());
        let mut slots = Vec::new();
        let mut truths = Vec::new();
        for (pos, &id) in caption.iter().enumerate() {
            if id >= self.mask_id() {
                return Err(PipelineError::OutOfVocabulary { id, size: self.mask_id() });
            }
            if id < n {
                masked_ids.push(self.mask_id());
                slots.push(pos);
                truths.push(id);
            } else {
                masked_ids.push(id);
            }
        }
        Ok(MaskedCaption { masked_ids, slots, truths })
    }
}

/// Joint text/visual attention stack that predicts the hidden noun at every
/// masked caption slot from the mask-gated side latent.
pub struct MaskedTokenPredictor {
    vis_proj: Linear,
    vis_pos: Tensor,
    blocks: Vec<TransformerBlock>,
    head: Linear,
}

impl MaskedTokenPredictor {
    pub fn new(rng: &mut ChaCha8Rng, d_latent: usize, d_text: usize, grid_hw: (usize, usize), n_nouns: usize, n_heads: usize, depth: usize) -> Self {
        let (h, w) = grid_hw;
        let std = (1.0 / d_text as f32).sqrt();
        MaskedTokenPredictor {
            vis_proj: Linear::new(rng, d_latent, d_text),
            vis_pos: Tensor::param(crate::nets::normal_vec(rng, h * w * d_text, std), &[h * w, d_text]).unwrap(),
            blocks: (0..depth).map(|_| TransformerBlock::new(rng, d_text, n_heads)).collect(),
            head: Linear::new(rng, d_text, n_nouns),
        }
    }

    /// `masked_latent`: m_v ⊙ z_y as [1, D, H, W]. Returns slot logits
    /// [n_slots, N]; no slots yields an empty-prediction marker (`None`).
    pub fn predict(
        &self,
        text_encoder: &TextEncoder,
        caption: &MaskedCaption,
        masked_latent: &Tensor,
    ) -> PipelineResult<Option<Tensor>> {
        if caption.slots.is_empty() {
            return Ok(None);
        }
        let s = masked_latent.shape().to_vec();
        let text = text_encoder.encode(&caption.masked_ids)?;
        let hw = s[2] * s[3];
        let vis_tokens = masked_latent.reshape(&[s[1], hw])?.transpose()?;
        let vis = self.vis_proj.forward(&vis_tokens)?.add(&self.vis_pos)?;
        let mut joint = Tensor::concat(&[text, vis], 0)?;
        for block in &self.blocks {
            joint = block.forward(&joint, false)?;
        }
        let slot_rows = joint.gather_rows(&caption.slots)?;
        Ok(Some(self.head.forward(&slot_rows)?))
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut ps = self.vis_proj.params();
        ps.push(self.vis_pos.clone());
        for b in &self.blocks {
            ps.extend(b.params());
        }
        ps.extend(self.head.params());
        ps
    }
}

/// Mean cross-entropy between slot logits and ground-truth noun ids; a
/// captions-without-slots batch contributes exactly zero.
pub fn mask_aux_loss(slot_logits: Option<&Tensor>, truths: &[usize]) -> TensorResult<Tensor> {
    let logits = match slot_logits {
        None => return Ok(Tensor::scalar(0.0)),
        Some(l) => l,
    };
    let s = logits.shape();
    let (n, classes) = (s[0], s[1]);
    assert_eq!(n, truths.len());
    let mut one_hot = vec![0.0f32; n * classes];
    for (i, &t) in truths.iter().enumerate() {
        one_hot[i * classes + t] = 1.0;
    }
    let oh = Tensor::from_vec(one_hot, &[n, classes])?;
    Ok(logits.log_softmax_last().mul(&oh)?.sum_all().scale(-1.0 / n as f32))
}
