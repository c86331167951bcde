//! Noise-prediction objective and the base / SR training loops.

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::models::{BaseModel, Conditioning, ControlArch, NoisePredictor, SrModel};
use super::schedule::NoiseSchedule;
use super::text::TextConfig;
use super::unet::UNetArch;
use super::vae::Vae;
use crate::checkpoint::Checkpoint;
use crate::dape::{Dape, PromptBundle};
use crate::degradation::{synthesize_batch, DegradationConfig};
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::parallel::Execution;
use crate::rng::normal_tensor;
use crate::tags::{TagSet, TagVocabulary};

/// Draws `t ~ U{1..T}` per row and `eps ~ N(0, I)`, returns the mean squared
/// error between `eps` and the prediction on the noised latent.
pub fn diffusion_loss<R: Rng + ?Sized>(
    predict: impl FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
    z0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let b = z0.dim(0)?;
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.t_max())).collect();
    let eps = normal_tensor(z0.dims(), z0.dtype(), rng)?;
    let z_t = schedule.add_noise(z0, &eps, &t)?;
    let pred = predict(&z_t, &t)?;
    if pred.dims() != eps.dims() {
        bail!(Argument, "prediction shape {:?} differs from noise shape {:?}", pred.dims(), eps.dims());
    }
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// The SR objective: noise-prediction MSE of `model` under `cond`.
pub fn sr_training_loss<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z0: &Tensor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    diffusion_loss(|z_t, t| model.predict_noise(z_t, t, cond), z0, schedule, rng)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<candle_nn::AdamW> {
    Ok(candle_nn::AdamW::new(
        vars,
        candle_nn::ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Probability of replacing the tags with the null prompt.
    pub null_prompt_prob: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            iterations: 2000,
            null_prompt_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub initial_heldout: f64,
    pub final_heldout: f64,
    pub losses: Vec<(usize, f64)>,
}

/// Stacks `(C, h, w)` latents selected by `idx`.
fn gather(latents: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
    Ok(Tensor::stack(&rows, 0)?)
}

/// Held-out loss with a fixed stream so that successive evaluations are comparable.
fn fixed_heldout_loss(
    n: usize,
    seed: u64,
    mut batch_loss: impl FnMut(&[usize], &mut ChaCha8Rng) -> Result<f64>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(16) {
        total += batch_loss(chunk, &mut rng)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

pub struct LatentSet<'a> {
    pub latents: &'a [Tensor],
    pub tags: &'a [TagSet],
}

/// Trains the text-conditioned base denoiser on clean latents.
#[allow(clippy::too_many_arguments)]
pub fn train_base(
    unet: &UNetArch,
    text: &TextConfig,
    vocab: &TagVocabulary,
    train: LatentSet<'_>,
    heldout: LatentSet<'_>,
    schedule: &NoiseSchedule,
    cfg: &BaseTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(BaseModel, DiffusionReport)> {
    if train.latents.is_empty() || train.latents.len() != train.tags.len() {
        bail!(Argument, "base training needs a non-empty latent set with one tag set per latent");
    }
    let model = BaseModel::init(unet, text, vocab, seed, DType::F32)?;
    let eval_set = if heldout.latents.is_empty() { &train } else { &heldout };
    let eval = |m: &BaseModel| {
        fixed_heldout_loss(eval_set.latents.len(), seed ^ 0xba5e, |idx, rng| {
            let z0 = gather(eval_set.latents, idx)?;
            let tags: Vec<&TagSet> = idx.iter().map(|&i| &eval_set.tags[i]).collect();
            let ctx = m.encode_tags(&tags)?;
            scalar(&diffusion_loss(|z, t| m.predict(z, t, &ctx), &z0, schedule, rng)?)
        })
    };
    let initial_heldout = eval(&model)?;
    let mut opt = adam(model.store().trainable_vars(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0);
    let mut losses = Vec::new();
    let empty = TagSet::empty();
    for step in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.latents.len())).collect();
        let tags: Vec<&TagSet> = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < cfg.null_prompt_prob {
                    &empty
                } else {
                    &train.tags[i]
                }
            })
            .collect();
        let z0 = gather(train.latents, &idx)?;
        let ctx = model.encode_tags(&tags)?;
        let loss = diffusion_loss(|z, t| model.predict(z, t, &ctx), &z0, schedule, &mut rng)?;
        opt.backward_step(&loss)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            bail!(Numeric, "base loss diverged at step {step}");
        }
        on_step(step, l);
        losses.push((step, l));
    }
    let final_heldout = eval(&model)?;
    let ck = model.to_checkpoint(cfg.iterations as u64)?;
    Ok((
        BaseModel::from_checkpoint(&ck, DType::F32)?,
        DiffusionReport {
            initial_heldout,
            final_heldout,
            losses,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrTrainConfig {
    pub control: ControlArch,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Threshold used to decode hard prompts during training.
    pub threshold: f64,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            control: ControlArch::default(),
            learning_rate: 1e-4,
            batch_size: 16,
            iterations: 5000,
            threshold: 0.5,
        }
    }
}

/// Fixed held-out pairs: clean latents and degraded LR images.
pub struct SrPairs<'a> {
    pub latents: &'a [Tensor],
    pub lr: &'a [ImageTensor],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrReport {
    pub diffusion: DiffusionReport,
    pub checksums_before: FrozenChecksums,
    pub checksums_after: FrozenChecksums,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub base_unet: String,
    pub text_encoder: String,
    pub vae: String,
    pub dape: String,
}

pub fn frozen_checksums(model: &SrModel, vae: &Vae, dape: &Dape) -> Result<FrozenChecksums> {
    Ok(FrozenChecksums {
        base_unet: model.frozen_store().checksum(super::models::UNET_PREFIX)?,
        text_encoder: model.base.store().checksum(super::models::TEXT_PREFIX)?,
        vae: vae.store().checksum("")?,
        dape: dape.store().checksum("")?,
    })
}

/// Everything `train_sr` reads but never updates.
pub struct SrInputs<'a> {
    pub base: &'a Checkpoint,
    pub vae: &'a Vae,
    pub dape: &'a Dape,
    pub schedule: &'a NoiseSchedule,
    pub degradation: &'a DegradationConfig,
}

fn bundles_for(dape: &Dape, lrs: &[&ImageTensor], threshold: f64) -> Result<Vec<PromptBundle>> {
    dape.extract_batch(lrs, threshold)
}

/// Trains the control branch, LR encoder, bridges and RCA on HR images
/// degraded on the fly, with prompts from the frozen extractor.
#[allow(clippy::too_many_arguments)]
pub fn train_sr(
    inputs: SrInputs<'_>,
    train_hr: &[ImageTensor],
    train_latents: &[Tensor],
    heldout: SrPairs<'_>,
    cfg: &SrTrainConfig,
    seed: u64,
    exec: Execution,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(SrModel, SrReport)> {
    if train_hr.is_empty() || train_hr.len() != train_latents.len() {
        bail!(Argument, "sr training needs HR images with matching latents");
    }
    if heldout.latents.is_empty() || heldout.latents.len() != heldout.lr.len() {
        bail!(Argument, "sr held-out set needs matching latents and LR images");
    }
    let SrInputs {
        base,
        vae,
        dape,
        schedule,
        degradation,
    } = inputs;
    let model = SrModel::init(base, &cfg.control, dape.seq_shape(), vae.arch().downscale, seed, DType::F32)?;
    let checksums_before = frozen_checksums(&model, vae, dape)?;
    let out_size = (train_hr[0].height(), train_hr[0].width());

    let held_refs: Vec<&ImageTensor> = heldout.lr.iter().collect();
    let held_bundles = bundles_for(dape, &held_refs, cfg.threshold)?;
    let eval = |m: &SrModel| {
        fixed_heldout_loss(heldout.latents.len(), seed ^ 0x5e, |idx, rng| {
            let z0 = gather(heldout.latents, idx)?;
            let lrs: Vec<&ImageTensor> = idx.iter().map(|&i| &heldout.lr[i]).collect();
            let bs: Vec<&PromptBundle> = idx.iter().map(|&i| &held_bundles[i]).collect();
            let cond = m.condition(&lrs, &bs, out_size)?;
            scalar(&sr_training_loss(m, &z0, &cond, schedule, rng)?)
        })
    };
    let initial_heldout = eval(&model)?;
    let mut opt = adam(model.trainable_store().trainable_vars(), cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let mut losses = Vec::new();
    for step in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train_hr.len())).collect();
        let seeds: Vec<u64> = idx.iter().map(|_| rng.random()).collect();
        let hrs: Vec<ImageTensor> = idx.iter().map(|&i| train_hr[i].clone()).collect();
        let pairs = synthesize_batch(&hrs, degradation, &seeds, exec)?;
        let lrs: Vec<&ImageTensor> = pairs.iter().map(|(l, _)| l).collect();
        let bundles = bundles_for(dape, &lrs, cfg.threshold)?;
        let brefs: Vec<&PromptBundle> = bundles.iter().collect();
        let cond = model.condition(&lrs, &brefs, out_size)?;
        let z0 = gather(train_latents, &idx)?;
        let loss = sr_training_loss(&model, &z0, &cond, schedule, &mut rng)?;
        opt.backward_step(&loss)?;
        let l = scalar(&loss)?;
        if !l.is_finite() {
            bail!(Numeric, "sr loss diverged at step {step}");
        }
        on_step(step, l);
        losses.push((step, l));
    }
    let final_heldout = eval(&model)?;
    let checksums_after = frozen_checksums(&model, vae, dape)?;
    let ck = model.to_checkpoint(cfg.iterations as u64)?;
    let frozen_model = SrModel::from_checkpoints(base, &ck, DType::F32)?;
    Ok((
        frozen_model,
        SrReport {
            diffusion: DiffusionReport {
                initial_heldout,
                final_heldout,
                losses,
            },
            checksums_before,
            checksums_after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn schedule() -> NoiseSchedule {
        super::super::schedule::make_schedule(100, 1e-3, 0.02, 10).unwrap()
    }

    /// Recovers the exact noise from `(z_t, t)` given the known `z0`.
    fn oracle<'a>(z0: &Tensor, s: &'a NoiseSchedule, offset: f64) -> impl FnOnce(&Tensor, &[usize]) -> Result<Tensor> + 'a {
        let z0 = z0.clone();
        move |z_t: &Tensor, t: &[usize]| {
            let ab = s.alpha_bar(t[0]);
            let eps = ((z_t - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
            Ok((eps + offset)?)
        }
    }

    #[test]
    fn exact_noise_gives_zero_and_offset_gives_its_square() {
        let s = schedule();
        let z0 = Tensor::randn(0f64, 1.0, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l0 = scalar(&diffusion_loss(oracle(&z0, &s, 0.0), &z0, &s, &mut rng).unwrap()).unwrap();
        assert!(l0 < 1e-20, "{l0}");
        let l1 = scalar(&diffusion_loss(oracle(&z0, &s, 0.25), &z0, &s, &mut rng).unwrap()).unwrap();
        assert!((l1 - 0.0625).abs() < 1e-12, "{l1}");
    }

    #[test]
    fn wrong_prediction_shape_is_an_error() {
        let s = schedule();
        let z0 = Tensor::zeros((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = diffusion_loss(|_, _| Ok(Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu)?), &z0, &s, &mut rng);
        assert!(r.is_err());
    }
}
