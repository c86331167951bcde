//! Spaced DDPM reverse sampling with optional LR-embedding initialization.

use candle_core::{DType, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dape::PromptBundle;
use crate::degradation::bicubic;
use crate::diffusion::models::{Conditioning, NoisePredictor, SrModel};
use crate::diffusion::schedule::{add_noise_at, NoiseSchedule};
use crate::diffusion::vae::Vae;
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::rng::normal_tensor;

/// Timestep whose `ᾱ` mixes the LR latent into the starting noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LreStart {
    /// First (largest) step of the spaced sequence.
    MaxSpaced,
    /// Last training timestep `T`.
    TrainMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub use_lre: bool,
    pub seed: u64,
    /// 1.0 disables classifier-free guidance.
    pub guidance_scale: f64,
    pub lre_start: LreStart,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            use_lre: true,
            seed: 0,
            guidance_scale: 1.0,
            lre_start: LreStart::MaxSpaced,
        }
    }
}

fn lre_timestep(schedule: &NoiseSchedule, cfg: &SamplerConfig) -> usize {
    match cfg.lre_start {
        LreStart::MaxSpaced => schedule.spaced_steps().iter().copied().max().unwrap_or(schedule.t_max()),
        LreStart::TrainMax => schedule.t_max(),
    }
}

/// LRE mixing of `z_lr` with the given noise at the start timestep, or the
/// noise itself when LRE is off.
pub fn initial_latent_with(z_lr: &Tensor, eps: &Tensor, schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Tensor> {
    if z_lr.dims() != eps.dims() {
        bail!(Argument, "LR latent {:?} does not match noise shape {:?}", z_lr.dims(), eps.dims());
    }
    if !cfg.use_lre {
        return Ok(eps.clone());
    }
    let ab = schedule.alpha_bar(lre_timestep(schedule, cfg));
    add_noise_at(z_lr, eps, &vec![ab; z_lr.dim(0)?])
}

/// Starting latent drawn from the `cfg.seed` stream.
pub fn initial_latent(z_lr: &Tensor, schedule: &NoiseSchedule, cfg: &SamplerConfig) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = normal_tensor(z_lr.dims(), z_lr.dtype(), &mut rng)?;
    initial_latent_with(z_lr, &eps, schedule, cfg)
}

/// One spaced posterior step from `t` to `t_prev` (`t_prev = 0` at the end).
/// Returns the posterior mean and its standard deviation.
pub fn posterior_step(
    x: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64)> {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let beta = 1.0 - ab / ab_prev;
    let x0 = ((x - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let mean = ((x0 * c0)? + (x * ct)?)?;
    let var = beta * (1.0 - ab_prev) / (1.0 - ab);
    Ok((mean, var.max(0.0).sqrt()))
}

/// Reverse diffusion over the spaced steps, returning the final latent.
pub fn sample_latent<M: NoisePredictor + ?Sized>(
    model: &M,
    z_lr: &Tensor,
    cond: &Conditioning,
    uncond: Option<&Conditioning>,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    if cfg.steps == 0 || cfg.steps > schedule.t_max() {
        bail!(Argument, "sampler steps {} outside [1, {}]", cfg.steps, schedule.t_max());
    }
    let sched = schedule.respaced(cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps0 = normal_tensor(z_lr.dims(), z_lr.dtype(), &mut rng)?;
    let mut x = initial_latent_with(z_lr, &eps0, &sched, cfg)?;
    let b = z_lr.dim(0)?;
    let steps = sched.spaced_steps().to_vec();
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let tv = vec![t; b];
        let mut eps = model.predict_noise(&x, &tv, cond)?;
        if let (Some(u), true) = (uncond, cfg.guidance_scale != 1.0) {
            let e_u = model.predict_noise(&x, &tv, u)?;
            eps = (&e_u + ((eps - &e_u)? * cfg.guidance_scale)?)?;
        }
        let (mean, std) = posterior_step(&x, &eps, t, t_prev, &sched)?;
        x = if t_prev == 0 {
            mean
        } else {
            (mean + (normal_tensor(z_lr.dims(), z_lr.dtype(), &mut rng)? * std)?)?
        };
    }
    Ok(x)
}

/// Frozen-VAE latent of the LR images bicubic-upsampled to output size.
pub fn lr_latent(vae: &Vae, lrs: &[&ImageTensor], out_size: (usize, usize)) -> Result<Tensor> {
    let ups = lrs
        .iter()
        .map(|im| bicubic(im, out_size.0, out_size.1).map(ImageTensor::clamp01))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageTensor> = ups.iter().collect();
    vae.encode(&refs)
}

/// Super-resolves a batch of LR images with their prompt bundles.
pub fn sample(
    model: &SrModel,
    vae: &Vae,
    lrs: &[&ImageTensor],
    bundles: &[&PromptBundle],
    scale: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<ImageTensor>> {
    if lrs.is_empty() {
        return Ok(Vec::new());
    }
    let out = (lrs[0].height() * scale, lrs[0].width() * scale);
    if lrs.iter().any(|l| l.height() * scale != out.0 || l.width() * scale != out.1) {
        bail!(Argument, "LR images in one batch must share a size");
    }
    let z_lr = lr_latent(vae, lrs, out)?.to_dtype(model.dtype())?;
    if z_lr.dim(1)? != model.latent_channels() {
        bail!(Argument, "vae latent channels do not match the denoiser");
    }
    let cond = model.condition(lrs, bundles, out)?;
    let uncond = if cfg.guidance_scale != 1.0 {
        let (s, d) = (model.hyper().rep_seq_len, model.hyper().rep_dim);
        let nulls: Vec<PromptBundle> = (0..lrs.len()).map(|_| PromptBundle::null(s, d)).collect();
        let refs: Vec<&PromptBundle> = nulls.iter().collect();
        Some(model.condition(lrs, &refs, out)?)
    } else {
        None
    };
    let z = sample_latent(model, &z_lr, &cond, uncond.as_ref(), schedule, cfg)?;
    vae.decode(&z.to_dtype(DType::F32)?.to_dtype(vae.dtype())?)
}

/// Noise seed of batch `k` when a set is sampled in fixed-size batches.
pub fn batch_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add(k as u64)
}

/// Super-resolves any number of images in batches of `batch_size`; batch `k`
/// samples with [`batch_seed`]`(cfg.seed, k)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_batched(
    model: &SrModel,
    vae: &Vae,
    lrs: &[ImageTensor],
    bundles: &[PromptBundle],
    scale: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    batch_size: usize,
) -> Result<Vec<ImageTensor>> {
    if lrs.len() != bundles.len() {
        bail!(Argument, "{} LR images but {} prompt bundles", lrs.len(), bundles.len());
    }
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(lrs.len());
    for (k, (l, b)) in lrs.chunks(batch_size).zip(bundles.chunks(batch_size)).enumerate() {
        let lr: Vec<&ImageTensor> = l.iter().collect();
        let br: Vec<&PromptBundle> = b.iter().collect();
        let c = SamplerConfig {
            seed: batch_seed(cfg.seed, k),
            ..cfg.clone()
        };
        out.extend(sample(model, vae, &lr, &br, scale, schedule, &c)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use candle_core::Device;

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, z: &Tensor, _t: &[usize], _c: &Conditioning) -> Result<Tensor> {
            Ok(z.zeros_like()?)
        }
    }

    fn cond() -> Conditioning {
        let z = Tensor::zeros((1, 1, 1), DType::F32, &Device::Cpu).unwrap();
        Conditioning {
            lr: z.clone(),
            text: z.clone(),
            rep: z,
        }
    }

    #[test]
    fn lre_endpoints() {
        let z = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
        let e = Tensor::randn(0f32, 1.0, (2, 4, 4, 4), &Device::Cpu).unwrap();
        let s = make_schedule(100, 1e-3, 0.02, 10).unwrap();
        let off = SamplerConfig { use_lre: false, ..Default::default() };
        assert_eq!(
            initial_latent_with(&z, &e, &s, &off).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            e.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let a = initial_latent(&z, &s, &SamplerConfig::default()).unwrap();
        let b = initial_latent(&z, &s, &SamplerConfig::default()).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn too_many_steps_is_an_error() {
        let s = make_schedule(10, 1e-3, 0.02, 10).unwrap();
        let z = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let cfg = SamplerConfig { steps: 11, ..Default::default() };
        assert!(sample_latent(&Zero, &z, &cond(), None, &s, &cfg).is_err());
    }

    #[test]
    fn final_step_returns_the_clean_estimate() {
        // With a zero noise prediction the last step from t to 0 returns x / sqrt(ᾱ_t).
        let s = make_schedule(10, 1e-3, 0.02, 10).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0]], &Device::Cpu).unwrap();
        let (m, std) = posterior_step(&x, &x.zeros_like().unwrap(), 1, 0, &s).unwrap();
        assert_eq!(std, 0.0);
        let want = 1.0 / s.alpha_bar(1).sqrt();
        let got = m.to_vec2::<f64>().unwrap();
        assert!((got[0][0] - want).abs() < 1e-12 && (got[0][1] + 2.0 * want).abs() < 1e-12);
    }

    #[test]
    fn single_step_sampling_is_finite_and_deterministic() {
        let s = make_schedule(50, 1e-3, 0.02, 10).unwrap();
        let z = Tensor::randn(0f32, 1.0, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let cfg = SamplerConfig { steps: 1, ..Default::default() };
        let a = sample_latent(&Zero, &z, &cond(), None, &s, &cfg).unwrap();
        let b = sample_latent(&Zero, &z, &cond(), None, &s, &cfg).unwrap();
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(av.iter().all(|v| v.is_finite()));
        assert_eq!(av, b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}
