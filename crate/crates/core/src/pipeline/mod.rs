//! End-to-end assembly: model construction, the joint training loop, and
//! the transmit/receive paths.
//!
//! One `Model` owns every sub-network. The transmitted description of an
//! image is the entropy-coded index grid of its quantized aligned latent;
//! everything else the receiver needs (side view, caption) is local to the
//! receiver. Training runs on synthetic stereo pairs from [`scenes`].

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod scenes;
pub mod sweep;

pub use config::Config;
pub use optim::{lr_schedule, AdamW, ParamGroup, PEAK_LR};
pub use scenes::{default_vocabulary, gen_scene, SyntheticScene};
pub use sweep::RDPoint;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coding::{
    decode_indices, encode_indices, read_bitstream, verify_indices, write_bitstream,
    BitstreamHeader, EntropyModel,
};
use crate::diffusion::{
    decode_latent, diffusion_loss, gaussian_noise, sample, ConditionBundle, NoiseSchedule, UNet,
};
use crate::error::{CodecError, PipelineError, PipelineResult};
use crate::gates::{CategoryGate, DetailGate};
use crate::mask::{
    mask_aux_loss, sample_gumbel, MaskGenerator, MaskedTokenPredictor, ObjectVocabulary,
};
use crate::nets::{LatentAligner, TextEncoder, TinyAutoencoder, LATENT_CHANNELS};
use crate::tensor::Tensor;
use crate::vq::{vq_loss, Codebook};

/// Channel width of the aligned latents that the codebook, mask, and gates
/// share.
pub const ALIGN_DIM: usize = 16;
/// Width of text-encoder token features.
pub const TEXT_DIM: usize = 32;
/// Longest caption the positional tables accommodate.
pub const MAX_CAPTION: usize = 8;

const BASE_LAMBDA: f32 = 0.1;
const PRETRAIN_LR: f32 = 2e-3;
/// Steps without use before a codeword is reseeded; short runs need quick
/// turnover or the codebook quietly shrinks to a handful of live entries.
const DEAD_AFTER_STEPS: u64 = 25;

/// Which conditioning inputs the receiver path substitutes with nulls or
/// identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    /// Detail branch replaced by a learned null embedding.
    NoZd,
    /// Both conditioning branches replaced by learned null embeddings.
    NoZdZxc,
    /// Detail gate skipped: the raw side latent passes through.
    NoG2,
    /// Both gates skipped: raw quantized latent and raw side latent.
    NoG1G2,
}

impl AblationMode {
    pub fn parse(s: &str) -> PipelineResult<AblationMode> {
        match s {
            "none" | "full" => Ok(AblationMode::Full),
            "no_zd" => Ok(AblationMode::NoZd),
            "no_zd_zxc" => Ok(AblationMode::NoZdZxc),
            "no_g2" => Ok(AblationMode::NoG2),
            "no_g1_g2" => Ok(AblationMode::NoG1G2),
            other => Err(PipelineError::Config(format!(
                "unknown ablation {other:?}; expected none, no_zd, no_zd_zxc, no_g2, or no_g1_g2"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "none",
            AblationMode::NoZd => "no_zd",
            AblationMode::NoZdZxc => "no_zd_zxc",
            AblationMode::NoG2 => "no_g2",
            AblationMode::NoG1G2 => "no_g1_g2",
        }
    }
}

pub struct Model {
    pub vae: TinyAutoencoder,
    pub align_x: LatentAligner,
    pub align_y: LatentAligner,
    pub codebook: Codebook,
    pub text_enc: TextEncoder,
    pub mask_gen: MaskGenerator,
    pub mask_pred: MaskedTokenPredictor,
    pub g1: CategoryGate,
    pub g2: DetailGate,
    pub unet: UNet,
    pub entropy: EntropyModel,
    pub null_zd: Tensor,
    pub null_zxc: Tensor,
    pub sched: NoiseSchedule,
    pub vocab: ObjectVocabulary,
    pub image_size: usize,
    pub latent_size: usize,
    pub ablation: AblationMode,
}

impl Model {
    pub fn new(
        cfg: &Config,
        vocab: ObjectVocabulary,
        ablation: AblationMode,
        rng: &mut ChaCha8Rng,
    ) -> PipelineResult<Model> {
        cfg.validate()?;
        let ls = cfg.latent_size();
        let vae = TinyAutoencoder::new(rng);
        let align_x = LatentAligner::new(rng, LATENT_CHANNELS, ALIGN_DIM, 2);
        let align_y = LatentAligner::new(rng, LATENT_CHANNELS, ALIGN_DIM, 2);
        let mut codebook = Codebook::new(
            crate::nets::normal_vec(rng, cfg.k * ALIGN_DIM, 1.0),
            cfg.k,
            ALIGN_DIM,
        );
        codebook.set_dead_after(DEAD_AFTER_STEPS);
        let text_enc = TextEncoder::new(rng, vocab.table_size(), TEXT_DIM, 2, 2, MAX_CAPTION);
        let mask_gen = MaskGenerator::new(rng, ALIGN_DIM, cfg.tau, cfg.theta);
        let mask_pred =
            MaskedTokenPredictor::new(rng, ALIGN_DIM, TEXT_DIM, (ls, ls), vocab.noun_count(), 2, 2);
        let g1 = CategoryGate::new(rng, ALIGN_DIM, 2, 2);
        let g2 = DetailGate::new(rng, ALIGN_DIM);
        let unet = UNet::new(rng, LATENT_CHANNELS, ALIGN_DIM, TEXT_DIM, cfg.t);
        let entropy = EntropyModel::new(rng, cfg.k);
        let null_zd = Tensor::param(
            crate::nets::normal_vec(rng, ALIGN_DIM * ls * ls, 0.02),
            &[1, ALIGN_DIM, ls, ls],
        )?;
        let null_zxc = Tensor::param(
            crate::nets::normal_vec(rng, ALIGN_DIM * ls * ls, 0.02),
            &[1, ALIGN_DIM, ls, ls],
        )?;
        Ok(Model {
            vae,
            align_x,
            align_y,
            codebook,
            text_enc,
            mask_gen,
            mask_pred,
            g1,
            g2,
            unet,
            entropy,
            null_zd,
            null_zxc,
            sched: NoiseSchedule::rescaled_linear(cfg.t)?,
            vocab,
            image_size: cfg.image_size,
            latent_size: ls,
            ablation,
        })
    }

    fn param_sections(&self) -> Vec<(&'static str, Vec<Tensor>)> {
        vec![
            ("vae", self.vae.params()),
            ("align_x", self.align_x.params()),
            ("align_y", self.align_y.params()),
            ("codebook", self.codebook.params()),
            ("text", self.text_enc.params()),
            ("mask_gen", self.mask_gen.params()),
            ("mask_pred", self.mask_pred.params()),
            ("g1", self.g1.params()),
            ("g2", self.g2.params()),
            ("unet", self.unet.params()),
            ("entropy", self.entropy.params()),
            ("null_zd", vec![self.null_zd.clone()]),
            ("null_zxc", vec![self.null_zxc.clone()]),
        ]
    }

    /// Every weight with a stable name, for checkpoints.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (group, params) in self.param_sections() {
            for (i, p) in params.into_iter().enumerate() {
                out.push((format!("{group}.{i}"), p));
            }
        }
        out
    }

    /// Optimizer groups for the joint phase. The autoencoder stays frozen.
    /// The entropy model gets a rate-pressure-scaled step: its parameters
    /// see no loss besides the rate term, and Adam's normalization would
    /// otherwise erase lambda entirely.
    pub fn param_groups(&self, lambda: f32) -> Vec<ParamGroup> {
        let mut main = Vec::new();
        let mut entropy = Vec::new();
        for (group, params) in self.param_sections() {
            match group {
                "vae" => {}
                "entropy" => entropy.extend(params),
                _ => main.extend(params),
            }
        }
        vec![
            ParamGroup { params: main, lr_scale: 1.0 },
            ParamGroup { params: entropy, lr_scale: (lambda / BASE_LAMBDA).sqrt() },
        ]
    }

    /// Receiver-side conditioning for the sampler, honoring the ablation.
    ///
    /// `z_hat_x`: quantized main latent; `a_y`: aligned side latent;
    /// `masked_side`: quantized side latent gated by the visual mask;
    /// `m_hard`: the hard mask itself.
    pub fn conditioning(
        &self,
        z_hat_x: &Tensor,
        a_y: &Tensor,
        masked_side: &Tensor,
        m_hard: &Tensor,
        caption: &[usize],
    ) -> PipelineResult<ConditionBundle> {
        let z_text = self.text_enc.encode(caption)?;
        let z_hat_xc = match self.ablation {
            AblationMode::NoZdZxc => self.null_zxc.clone(),
            AblationMode::NoG1G2 => z_hat_x.clone(),
            _ => self.g1.forward(z_hat_x, masked_side)?,
        };
        let z_d = match self.ablation {
            AblationMode::NoZd | AblationMode::NoZdZxc => self.null_zd.clone(),
            AblationMode::NoG2 | AblationMode::NoG1G2 => a_y.clone(),
            AblationMode::Full => self.g2.forward(a_y, m_hard)?,
        };
        Ok(ConditionBundle { z_d, z_hat_xc, z_text })
    }
}

/// Cuts the autodiff tape: the result is a fresh leaf with the same values.
fn detach(t: &Tensor) -> Tensor {
    Tensor::from_vec(t.to_vec(), &t.shape().to_vec()).unwrap()
}

/// Position-major rows (stride `d`) of a [1, d, h, w] latent, the layout the
/// codebook seeding and dead-codeword pools expect.
fn latent_rows(t: &Tensor) -> Vec<f32> {
    let s = t.shape().to_vec();
    let (d, hw) = (s[1], s[2] * s[3]);
    let v = t.to_vec();
    let mut rows = Vec::with_capacity(d * hw);
    for p in 0..hw {
        for c in 0..d {
            rows.push(v[c * hw + p]);
        }
    }
    rows
}

/// Deterministic, disjoint train/held-out scene sets.
pub fn build_dataset(cfg: &Config) -> PipelineResult<(Vec<SyntheticScene>, Vec<SyntheticScene>)> {
    let vocab = default_vocabulary();
    let train = (0..cfg.train_scenes)
        .map(|i| gen_scene(cfg.seed + 1 + i as u64, cfg.image_size, &vocab))
        .collect::<PipelineResult<Vec<_>>>()?;
    let heldout = (0..cfg.heldout_scenes)
        .map(|i| gen_scene(cfg.seed + 1_000_000 + i as u64, cfg.image_size, &vocab))
        .collect::<PipelineResult<Vec<_>>>()?;
    Ok((train, heldout))
}

/// Reconstruction-only warm start for the autoencoder; everything else
/// stays untouched. Returns the per-step losses.
pub fn pretrain_vae(
    model: &Model,
    scenes: &[SyntheticScene],
    steps: u64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> PipelineResult<Vec<f32>> {
    let mut opt = AdamW::single(model.vae.params());
    let mut history = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let mut total: Option<Tensor> = None;
        for _ in 0..batch {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let img = if rng.gen_bool(0.5) { &scene.primary } else { &scene.side };
            let recon = model.vae.decode(&model.vae.encode(img)?)?;
            let d = recon.sub(img)?;
            let l = d.mul(&d)?.mean_all();
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let loss = total.unwrap().scale(1.0 / batch as f32);
        let value = loss.item();
        if !value.is_finite() {
            return Err(PipelineError::NonFiniteLoss { component: "vae_recon", step });
        }
        loss.backward()?;
        let warm = (step as f32 / 50.0).min(1.0);
        opt.step(PRETRAIN_LR * warm);
        opt.zero_grads();
        history.push(value);
    }
    Ok(history)
}

/// Re-seeds the codebook from aligned latents of real scenes. Run after the
/// autoencoder warm start, before the joint phase.
pub fn init_codebook(
    model: &mut Model,
    scenes: &[SyntheticScene],
    rng: &mut ChaCha8Rng,
) -> PipelineResult<()> {
    let mut pool = Vec::new();
    for scene in scenes.iter().take(48) {
        let z_x = model.vae.encode(&scene.primary)?;
        let z_y = model.vae.encode(&scene.side)?;
        pool.extend(latent_rows(&model.align_x.forward(&z_x)?));
        pool.extend(latent_rows(&model.align_y.forward(&z_y)?));
    }
    let mut book = Codebook::init(rng, model.codebook.size(), model.codebook.dim(), &pool)?;
    book.set_dead_after(DEAD_AFTER_STEPS);
    model.codebook = book;
    Ok(())
}

/// Per-step loss components, in the units the total is assembled from
/// (`l_rate` in bits per symbol).
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_vq: f32,
    pub l_mask: f32,
    pub l_rate: f32,
    pub l_diff: f32,
    pub lambda: f32,
    pub lambda_mask: f32,
    pub total: f32,
}

impl LossBreakdown {
    /// The total must re-assemble from its parts.
    pub fn consistent(&self) -> bool {
        let sum = self.l_vq + self.lambda_mask * self.l_mask + self.lambda * self.l_rate + self.l_diff;
        (self.total - sum).abs() <= 1e-6 * self.total.abs().max(1.0)
    }
}

struct SampleForward {
    l_vq: Tensor,
    l_mask: Tensor,
    l_rate: Tensor,
    l_diff: Tensor,
    used: Vec<usize>,
    pool: Vec<f32>,
}

fn sample_losses(
    model: &Model,
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
) -> PipelineResult<SampleForward> {
    let z_x = detach(&model.vae.encode(&scene.primary)?);
    let z_y = detach(&model.vae.encode(&scene.side)?);
    let a_x = model.align_x.forward(&z_x)?;
    let a_y = model.align_y.forward(&z_y)?;
    let q_x = model.codebook.quantize(&a_x)?;
    let q_y = model.codebook.quantize(&a_y)?;
    let l_vq = vq_loss(&a_x, &q_x)?.add(&vq_loss(&a_y, &q_y)?)?;

    let s = q_x.straight_through.shape().to_vec();
    let g = sample_gumbel(&[1, 1, s[2], s[3]], rng);
    let m = model.mask_gen.generate(&q_x.straight_through, &q_y.straight_through, Some(&g))?;
    let masked_side = q_y.straight_through.mul(&m.hard)?;

    let mc = model.vocab.mask_caption(&scene.caption)?;
    let masked_cont = a_y.mul(&m.hard)?;
    let slot_logits = model.mask_pred.predict(&model.text_enc, &mc, &masked_cont)?;
    let l_mask = mask_aux_loss(slot_logits.as_ref(), &mc.truths)?;

    let l_rate = model.entropy.rate_loss(&q_x.indices)?.scale(std::f32::consts::LOG2_E);

    let cond = model.conditioning(&q_x.straight_through, &a_y, &masked_side, &m.hard, &scene.caption)?;
    let t = rng.gen_range(0..model.sched.len());
    let eps = gaussian_noise(&z_x.shape().to_vec(), rng);
    let l_diff = diffusion_loss(&model.unet, &model.sched, &z_x, &cond, t, &eps)?;

    let mut pool = latent_rows(&a_x);
    pool.extend(latent_rows(&a_y));
    let mut used = q_x.indices;
    used.extend_from_slice(&q_y.indices);
    Ok(SampleForward { l_vq, l_mask, l_rate, l_diff, used, pool })
}

/// One optimizer update over a batch. Gradients accumulate across the batch
/// through a single scaled sum; dead codewords re-seed from this batch's
/// aligned latents.
pub fn train_step(
    model: &Model,
    batch: &[&SyntheticScene],
    opt: &mut AdamW,
    step: u64,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> PipelineResult<LossBreakdown> {
    let mut acc: Option<[Tensor; 4]> = None;
    let mut used = Vec::new();
    let mut pool = Vec::new();
    for scene in batch {
        let f = sample_losses(model, scene, rng)?;
        used.extend(f.used);
        pool.extend(f.pool);
        acc = Some(match acc {
            None => [f.l_vq, f.l_mask, f.l_rate, f.l_diff],
            Some([vq, mask, rate, diff]) => [
                vq.add(&f.l_vq)?,
                mask.add(&f.l_mask)?,
                rate.add(&f.l_rate)?,
                diff.add(&f.l_diff)?,
            ],
        });
    }
    let inv_b = 1.0 / batch.len() as f32;
    let [l_vq, l_mask, l_rate, l_diff] = acc
        .ok_or_else(|| PipelineError::Data("empty training batch".into()))?
        .map(|t| t.scale(inv_b));

    let parts =
        [("vq", &l_vq), ("mask", &l_mask), ("rate", &l_rate), ("diffusion", &l_diff)];
    for (component, t) in parts {
        if !t.item().is_finite() {
            return Err(PipelineError::NonFiniteLoss { component, step });
        }
    }

    let total = l_vq
        .add(&l_mask.scale(cfg.lambda_mask))?
        .add(&l_rate.scale(cfg.lambda))?
        .add(&l_diff)?;
    let breakdown = LossBreakdown {
        l_vq: l_vq.item(),
        l_mask: l_mask.item(),
        l_rate: l_rate.item(),
        l_diff: l_diff.item(),
        lambda: cfg.lambda,
        lambda_mask: cfg.lambda_mask,
        total: total.item(),
    };
    if !breakdown.total.is_finite() {
        return Err(PipelineError::NonFiniteLoss { component: "total", step });
    }
    total.backward()?;
    opt.step(lr_schedule(step, cfg.warmup_steps) * cfg.lr_boost);
    opt.zero_grads();
    model.codebook.refresh_dead(&used, &pool, rng);
    Ok(breakdown)
}

/// Joint training phase. The caller is expected to have pretrained the
/// autoencoder and seeded the codebook first.
pub fn train(
    model: &Model,
    cfg: &Config,
    scenes: &[SyntheticScene],
    rng: &mut ChaCha8Rng,
) -> PipelineResult<Vec<LossBreakdown>> {
    let mut opt = AdamW::new(model.param_groups(cfg.lambda));
    let mut history = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let batch: Vec<&SyntheticScene> =
            (0..cfg.batch).map(|_| &scenes[rng.gen_range(0..scenes.len())]).collect();
        history.push(train_step(model, &batch, &mut opt, step, cfg, rng)?);
    }
    Ok(history)
}

/// All stages in order: dataset, warm start, codebook seeding, joint phase.
pub fn train_from_config(
    cfg: &Config,
    ablation: AblationMode,
) -> PipelineResult<(Model, Vec<LossBreakdown>, Vec<SyntheticScene>)> {
    let (train_set, heldout) = build_dataset(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(cfg, default_vocabulary(), ablation, &mut rng)?;
    pretrain_vae(&model, &train_set, cfg.pretrain_steps, 4, &mut rng)?;
    init_codebook(&mut model, &train_set, &mut rng)?;
    let history = train(&model, cfg, &train_set, &mut rng)?;
    Ok((model, history, heldout))
}

pub struct EncodedImage {
    pub bytes: Vec<u8>,
    pub indices: Vec<usize>,
    pub payload_bits: usize,
}

/// Transmit side: quantize the aligned latent and entropy-code its indices.
pub fn encode_image(
    model: &Model,
    primary: &Tensor,
    lambda: f32,
    seed: u64,
) -> PipelineResult<EncodedImage> {
    let s = primary.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(PipelineError::Data(format!("expected a [1, 3, h, w] image, got {s:?}")));
    }
    if s[2] != model.image_size || s[3] != model.image_size {
        return Err(PipelineError::Data(format!(
            "image is {}x{}, model expects {0}x{0}",
            s[2], s[3]
        )));
    }
    let z_x = model.vae.encode(primary)?;
    let a_x = model.align_x.forward(&z_x)?;
    let q = model.codebook.quantize(&a_x)?;
    let payload = encode_indices(&model.entropy, &q.indices)?;
    let header = BitstreamHeader {
        image_h: s[2] as u16,
        image_w: s[3] as u16,
        latent_h: q.grid.1 as u16,
        latent_w: q.grid.2 as u16,
        codebook: model.codebook.size() as u16,
        lambda_tag: BitstreamHeader::tag_for(lambda)?,
        seed,
    };
    let payload_bits = payload.len() * 8;
    Ok(EncodedImage {
        bytes: write_bitstream(&header, &payload, &q.indices),
        indices: q.indices,
        payload_bits,
    })
}

/// Receive side: entropy-decode the indices, rebuild conditioning from the
/// local side view and caption, and sample the reconstruction.
pub fn decode_image(
    model: &Model,
    bytes: &[u8],
    side: &Tensor,
    caption: &[usize],
) -> PipelineResult<Tensor> {
    let (header, payload, stored_crc) = read_bitstream(bytes)?;
    if header.codebook as usize != model.codebook.size() {
        return Err(CodecError::CodebookMismatch {
            stream: header.codebook as usize,
            model: model.codebook.size(),
        }
        .into());
    }
    let (lh, lw) = (header.latent_h as usize, header.latent_w as usize);
    if lh != model.latent_size || lw != model.latent_size {
        return Err(CodecError::GridMismatch {
            stream_h: lh,
            stream_w: lw,
            model_h: model.latent_size,
            model_w: model.latent_size,
        }
        .into());
    }
    let ss = side.shape().to_vec();
    if ss != [1, 3, header.image_h as usize, header.image_w as usize] {
        return Err(PipelineError::Data(format!(
            "side view is {ss:?}, stream says {}x{}",
            header.image_h, header.image_w
        )));
    }
    header.lambda()?;
    let indices = decode_indices(&payload, &model.entropy, lh * lw)?;
    verify_indices(&indices, stored_crc)?;
    let z_hat_x = model.codebook.lookup(&indices, (1, lh, lw))?;

    let z_y = detach(&model.vae.encode(side)?);
    let a_y = model.align_y.forward(&z_y)?;
    let q_y = model.codebook.quantize(&a_y)?;
    let m = model.mask_gen.generate(&z_hat_x, &q_y.straight_through, None)?;
    let masked_side = q_y.straight_through.mul(&m.hard)?;
    let cond = model.conditioning(&z_hat_x, &a_y, &masked_side, &m.hard, caption)?;
    let z0 = sample(
        &model.unet,
        &cond,
        &model.sched,
        &[1, LATENT_CHANNELS, lh, lw],
        header.seed,
    )?;
    Ok(decode_latent(&model.vae, &z0)?)
}

/// Quality and rate figures for one transmitted image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub payload_bits: usize,
    pub est_bits: f64,
    pub psnr: f64,
    pub msssim: f64,
}

pub fn evaluate_scene(
    model: &Model,
    scene: &SyntheticScene,
    lambda: f32,
    seed: u64,
) -> PipelineResult<ImageEval> {
    let enc = encode_image(model, &scene.primary, lambda, seed)?;
    let est_bits = model.entropy.estimate_bits(&enc.indices)?;
    let recon = decode_image(model, &enc.bytes, &scene.side, &scene.caption)?;
    Ok(ImageEval {
        payload_bits: enc.payload_bits,
        est_bits,
        psnr: metrics::psnr(&scene.primary, &recon)?,
        msssim: metrics::ms_ssim(&scene.primary, &recon)?,
    })
}

/// Averages over a held-out set; per-image figures come along for bound
/// checks.
pub fn evaluate(
    model: &Model,
    scenes: &[SyntheticScene],
    lambda: f32,
    seed_base: u64,
) -> PipelineResult<(RDPoint, Vec<ImageEval>)> {
    if scenes.is_empty() {
        return Err(PipelineError::Data("empty evaluation set".into()));
    }
    let pixels = (model.image_size * model.image_size) as f64;
    let mut evals = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        evals.push(evaluate_scene(model, scene, lambda, seed_base + i as u64)?);
    }
    let n = evals.len() as f64;
    let point = RDPoint {
        lambda: lambda as f64,
        bpp_actual: evals.iter().map(|e| e.payload_bits as f64 / pixels).sum::<f64>() / n,
        bpp_est: evals.iter().map(|e| e.est_bits / pixels).sum::<f64>() / n,
        psnr: evals.iter().map(|e| e.psnr).sum::<f64>() / n,
        msssim: evals.iter().map(|e| e.msssim).sum::<f64>() / n,
    };
    Ok((point, evals))
}

/// One rate-distortion point per trained model, plus the CSV text.
pub fn rd_sweep(
    models: &[(f32, &Model)],
    scenes: &[SyntheticScene],
    seed_base: u64,
) -> PipelineResult<(Vec<RDPoint>, String)> {
    let mut points = Vec::with_capacity(models.len());
    for (lambda, model) in models {
        let (point, _) = evaluate(model, scenes, *lambda, seed_base)?;
        points.push(point);
    }
    let csv = sweep::to_csv(&points);
    Ok((points, csv))
}

/// Held-out accuracy of the masked-noun head, using the deterministic mask.
pub fn masked_noun_accuracy(model: &Model, scenes: &[SyntheticScene]) -> PipelineResult<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for scene in scenes {
        let z_x = detach(&model.vae.encode(&scene.primary)?);
        let z_y = detach(&model.vae.encode(&scene.side)?);
        let a_x = model.align_x.forward(&z_x)?;
        let a_y = model.align_y.forward(&z_y)?;
        let q_x = model.codebook.quantize(&a_x)?;
        let q_y = model.codebook.quantize(&a_y)?;
        let m = model.mask_gen.generate(&q_x.straight_through, &q_y.straight_through, None)?;
        let masked_cont = a_y.mul(&m.hard)?;
        let mc = model.vocab.mask_caption(&scene.caption)?;
        let Some(logits) = model.mask_pred.predict(&model.text_enc, &mc, &masked_cont)? else {
            continue;
        };
        let n_nouns = model.vocab.noun_count();
        let rows = logits.to_vec();
        for (si, &truth) in mc.truths.iter().enumerate() {
            let row = &rows[si * n_nouns..(si + 1) * n_nouns];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if best == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(PipelineError::Data("no maskable nouns in the evaluation set".into()));
    }
    Ok(correct as f64 / total as f64)
}

pub fn save_model(model: &Model, path: &Path) -> PipelineResult<()> {
    checkpoint::save(path, &model.named_params())
}

/// Loads weights into an already-constructed model. Every parameter must be
/// present with its exact shape; unknown names are an error.
pub fn load_model_weights(model: &Model, path: &Path) -> PipelineResult<()> {
    let entries = checkpoint::load(path)?;
    let params = model.named_params();
    let mut by_name: std::collections::HashMap<&str, &Tensor> =
        params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, shape, values) in &entries {
        let Some(p) = by_name.remove(name.as_str()) else {
            return Err(PipelineError::Checkpoint(format!("unexpected entry {name:?}")));
        };
        if p.shape() != &shape[..] {
            return Err(PipelineError::Checkpoint(format!(
                "entry {name:?} has shape {shape:?}, model expects {:?}",
                p.shape()
            )));
        }
        p.set_data(values);
    }
    if let Some(missing) = by_name.keys().next() {
        return Err(PipelineError::Checkpoint(format!("checkpoint is missing {missing:?}")));
    }
    Ok(())
}
