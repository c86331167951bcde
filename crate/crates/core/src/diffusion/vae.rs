//! Small convolutional VAE mapping images to a latent grid `downscale` times smaller.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{groups_for, ResBlock, Upsample};
use crate::checkpoint::{Checkpoint, ComponentKind};
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::params::{ParamBuilder, ParamStore};
use crate::rng::normal_tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeArch {
    /// Power of two.
    pub downscale: usize,
    /// One width per resolution, finest first; length is `log2(downscale) + 1`.
    pub widths: Vec<usize>,
    pub latent_channels: usize,
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            downscale: 4,
            widths: vec![16, 32, 64],
            latent_channels: 4,
        }
    }
}

impl VaeArch {
    pub fn levels(&self) -> usize {
        self.downscale.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downscale.is_power_of_two() || self.downscale < 2 {
            bail!(Config, "vae downscale {} must be a power of two >= 2", self.downscale);
        }
        if self.widths.len() != self.levels() + 1 {
            bail!(
                Config,
                "vae needs {} widths for downscale {}, got {}",
                self.levels() + 1,
                self.downscale,
                self.widths.len()
            );
        }
        if self.latent_channels == 0 || self.widths.contains(&0) {
            bail!(Config, "vae widths and latent channels must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub kl_weight: f64,
    /// Side of the random square crops trained on; 0 trains on whole images.
    pub crop_size: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 16,
            iterations: 1500,
            kl_weight: 1e-6,
            crop_size: 0,
        }
    }
}

struct Encoder {
    conv_in: Conv2d,
    levels: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    norm: GroupNorm,
    conv_out: Conv2d,
}

struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    levels: Vec<(Upsample, ResBlock)>,
    norm: GroupNorm,
    conv_out: Conv2d,
}

pub struct Vae {
    arch: VaeArch,
    enc: Encoder,
    dec: Decoder,
    store: ParamStore,
    latent_scale: f64,
    dtype: DType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeHyper {
    pub arch: VaeArch,
    /// Multiplier that brings encoder means to roughly unit variance.
    pub latent_scale: f64,
}

impl Vae {
    fn build(arch: &VaeArch, pb: &ParamBuilder, store: ParamStore, latent_scale: f64) -> Result<Self> {
        arch.validate()?;
        let w = &arch.widths;
        let e = pb.pp("encoder");
        let mut levels = Vec::new();
        for i in 0..arch.levels() {
            levels.push((
                ResBlock::new(&e.pp(format!("level{i}.res")), w[i], w[i], None)?,
                Conv2d::new(&e.pp(format!("level{i}.down")), w[i], w[i + 1], 3, 2)?,
            ));
        }
        let top = *w.last().unwrap();
        let enc = Encoder {
            conv_in: Conv2d::new(&e.pp("conv_in"), 3, w[0], 3, 1)?,
            levels,
            mid: ResBlock::new(&e.pp("mid"), top, top, None)?,
            norm: GroupNorm::new(&e.pp("norm"), groups_for(top), top)?,
            conv_out: Conv2d::new(&e.pp("conv_out"), top, 2 * arch.latent_channels, 3, 1)?,
        };
        let d = pb.pp("decoder");
        let mut levels = Vec::new();
        for i in (0..arch.levels()).rev() {
            levels.push((
                Upsample::new(&d.pp(format!("level{i}.up")), w[i + 1], w[i])?,
                ResBlock::new(&d.pp(format!("level{i}.res")), w[i], w[i], None)?,
            ));
        }
        let dec = Decoder {
            conv_in: Conv2d::new(&d.pp("conv_in"), arch.latent_channels, top, 3, 1)?,
            mid: ResBlock::new(&d.pp("mid"), top, top, None)?,
            levels,
            norm: GroupNorm::new(&d.pp("norm"), groups_for(w[0]), w[0])?,
            conv_out: Conv2d::new(&d.pp("conv_out"), w[0], 3, 3, 1)?,
        };
        Ok(Self {
            arch: arch.clone(),
            enc,
            dec,
            store,
            latent_scale,
            dtype: pb.dtype(),
        })
    }

    pub fn init(arch: &VaeArch, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, seed, dtype);
        Self::build(arch, &pb, store.clone(), 1.0)
    }

    /// Frozen VAE from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if ck.kind != ComponentKind::Vae {
            bail!(State, "expected a vae checkpoint, got {}", ck.kind);
        }
        let hyper: VaeHyper = ck.hyper_as()?;
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, dtype)
            .trainable(false)
            .with_source(ck.tensors.clone());
        Self::build(&hyper.arch, &pb, store.clone(), hyper.latent_scale)
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let hyper = VaeHyper {
            arch: self.arch.clone(),
            latent_scale: self.latent_scale,
        };
        let mut ck = Checkpoint::new(ComponentKind::Vae, serde_json::to_value(hyper)?, self.store.tensors());
        ck.step = step;
        Ok(ck)
    }

    pub fn arch(&self) -> &VaeArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let s = self.arch.downscale;
        if h % s != 0 || w % s != 0 {
            bail!(Argument, "image {h}x{w} is not divisible by the vae downscale {s}");
        }
        Ok(())
    }

    /// Posterior `(mean, logvar)` for `x: (B, 3, H, W)` in `[0, 1]`, unscaled.
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        self.check_size(h, w)?;
        let mut t = self.enc.conv_in.forward(&((x * 2.0)? - 1.0)?)?;
        for (res, down) in &self.enc.levels {
            t = down.forward(&res.forward(&t, None)?)?;
        }
        let t = self.enc.mid.forward(&t, None)?;
        let t = self.enc.conv_out.forward(&self.enc.norm.forward(&t)?.silu()?)?;
        let c = self.arch.latent_channels;
        let mean = t.narrow(1, 0, c)?;
        let logvar = t.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// Decoder output before clamping; `z` unscaled.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut t = self.dec.mid.forward(&self.dec.conv_in.forward(z)?, None)?;
        for (up, res) in &self.dec.levels {
            t = res.forward(&up.forward(&t)?, None)?;
        }
        let t = self.dec.conv_out.forward(&self.dec.norm.forward(&t)?.silu()?)?;
        Ok(((t + 1.0)? * 0.5)?)
    }

    /// Scaled posterior mean; deterministic.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.posterior(x)?.0 * self.latent_scale)?)
    }

    /// Images from scaled latents, clamped to `[0, 1]`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(&(z / self.latent_scale)?)?.clamp(0.0, 1.0)?)
    }

    pub fn encode(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let x = ImageTensor::batch_to_tensor(images, self.dtype, &Device::Cpu)?;
        self.encode_tensor(&x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Vec<ImageTensor>> {
        ImageTensor::unbatch(&self.decode_tensor(z)?)
    }

    /// Encode then decode, in chunks.
    pub fn reconstruct(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            out.extend(self.decode(&self.encode(&refs)?)?);
        }
        Ok(out)
    }

    /// Encodes a dataset into scaled latents, one `(C, h, w)` tensor per image.
    pub fn encode_all(&self, images: &[ImageTensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            let z = self.encode(&refs)?;
            for i in 0..chunk.len() {
                out.push(z.get(i)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeReport {
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub latent_scale: f64,
    pub losses: Vec<(usize, f64)>,
}

/// Mean RGB PSNR of reconstructions.
pub fn reconstruction_psnr(vae: &Vae, images: &[ImageTensor]) -> Result<f64> {
    if images.is_empty() {
        bail!(Argument, "no images to reconstruct");
    }
    let rec = vae.reconstruct(images)?;
    let mut total = 0.0;
    for (a, b) in images.iter().zip(&rec) {
        total += crate::metrics::psnr(a, b, false)?;
    }
    Ok(total / images.len() as f64)
}

pub fn train_vae(
    arch: &VaeArch,
    train: &[ImageTensor],
    heldout: &[ImageTensor],
    cfg: &VaeTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Vae, VaeReport)> {
    if train.is_empty() {
        bail!(Argument, "vae training set is empty");
    }
    if cfg.crop_size % arch.downscale != 0 {
        bail!(Config, "vae.train.crop_size {} is not a multiple of the downscale {}", cfg.crop_size, arch.downscale);
    }
    let vae = Vae::init(arch, seed, DType::F32)?;
    let eval_set = if heldout.is_empty() { train } else { heldout };
    let initial_psnr = reconstruction_psnr(&vae, eval_set)?;
    let mut opt = candle_nn::AdamW::new(
        vae.store.trainable_vars(),
        candle_nn::ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a3e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::new();
    for step in 0..cfg.iterations {
        let mut batch = Vec::new();
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(random_crop(&train[order[cursor]], cfg.crop_size, &mut rng)?);
            cursor += 1;
        }
        let refs: Vec<&ImageTensor> = batch.iter().collect();
        let x = ImageTensor::batch_to_tensor(&refs, DType::F32, &Device::Cpu)?;
        let (mean, logvar) = vae.posterior(&x)?;
        let eps = normal_tensor(mean.dims(), DType::F32, &mut rng)?;
        let z = (&mean + (eps * (&logvar * 0.5)?.exp()?)?)?;
        let rec = vae.decode_raw(&z)?;
        let mse = (rec - &x)?.sqr()?.mean_all()?;
        let kl = ((mean.sqr()? + logvar.exp()?)? - 1.0)?
            .sub(&logvar)?
            .sum(D::Minus1)?
            .mean_all()?;
        let loss = (&mse + (kl * (0.5 * cfg.kl_weight))?)?;
        opt.backward_step(&loss)?;
        let l = mse.to_scalar::<f32>()? as f64;
        if !l.is_finite() {
            bail!(Numeric, "vae loss diverged at step {step}");
        }
        on_step(step, l);
        losses.push((step, l));
    }
    let mut vae = vae;
    vae.latent_scale = estimate_latent_scale(&vae, train)?;
    let final_psnr = reconstruction_psnr(&vae, eval_set)?;
    let report = VaeReport {
        initial_psnr,
        final_psnr,
        latent_scale: vae.latent_scale,
        losses,
    };
    Ok((vae.freeze()?, report))
}

fn random_crop<R: Rng>(image: &ImageTensor, size: usize, rng: &mut R) -> Result<ImageTensor> {
    let (h, w, c) = image.dims();
    if size == 0 || (size >= h && size >= w) {
        return Ok(image.clone());
    }
    let (ch, cw) = (size.min(h), size.min(w));
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    ImageTensor::from_fn(ch, cw, c, |y, x, k| image.get(y0 + y, x0 + x, k))
}

fn estimate_latent_scale(vae: &Vae, images: &[ImageTensor]) -> Result<f64> {
    let sample: Vec<ImageTensor> = images.iter().take(256).cloned().collect();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in sample.chunks(32) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let x = ImageTensor::batch_to_tensor(&refs, DType::F32, &Device::Cpu)?;
        let v = vae.posterior(&x)?.0.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        n += v.len();
        sum += v.iter().sum::<f64>();
        sq += v.iter().map(|a| a * a).sum::<f64>();
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
    Ok(1.0 / std)
}

impl Vae {
    /// Reloads the weights as frozen tensors.
    pub fn freeze(&self) -> Result<Self> {
        Self::from_checkpoint(&self.to_checkpoint(0)?, self.dtype)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeArch {
        VaeArch {
            downscale: 4,
            widths: vec![4, 8, 8],
            latent_channels: 2,
        }
    }

    fn img(s: usize) -> ImageTensor {
        ImageTensor::from_fn(16, 16, 3, |y, x, c| ((x * 3 + y + c + s) % 11) as f32 / 10.0).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let v = Vae::init(&tiny(), 1, DType::F32).unwrap();
        let a = img(0);
        let z1 = v.encode(&[&a]).unwrap();
        let z2 = v.encode(&[&a]).unwrap();
        assert_eq!(z1.dims(), &[1, 2, 4, 4]);
        assert_eq!(
            z1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            z2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let back = v.decode(&z1).unwrap();
        assert_eq!(back[0].dims(), (16, 16, 3));
        assert!(back[0].is_in_unit_range());
        assert!(reconstruction_psnr(&v, &[a]).unwrap().is_finite());
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let v = Vae::init(&tiny(), 1, DType::F32).unwrap();
        let a = ImageTensor::filled(18, 16, 3, 0.5).unwrap();
        assert!(matches!(v.encode(&[&a]), Err(crate::error::Error::Argument(_))));
    }

    #[test]
    fn bad_arch_is_a_config_error() {
        assert!(VaeArch { downscale: 3, ..tiny() }.validate().is_err());
        assert!(VaeArch { widths: vec![4, 8], ..tiny() }.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip_keeps_scale_and_outputs() {
        let mut v = Vae::init(&tiny(), 2, DType::F32).unwrap();
        v.latent_scale = 0.37;
        let back = Vae::from_checkpoint(&v.to_checkpoint(5).unwrap(), DType::F32).unwrap();
        assert_eq!(back.latent_scale(), 0.37);
        assert_eq!(back.store().trainable_count(), 0);
        let a = img(3);
        assert_eq!(
            v.encode(&[&a]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            back.encode(&[&a]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
