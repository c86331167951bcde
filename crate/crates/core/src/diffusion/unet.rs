//! Two-level text-conditioned UNet noise predictor.
//!
//! Layout at latent resolution `r`:
//!
//! ```text
//! conv_in            -> A  (w0, r)
//! res_d0, attn_d0    -> B  (w0, r)
//! down0              -> C  (w0, r/2)
//! res_d1, attn_d1    -> D  (w1, r/2)
//! res_m1, attn_m, res_m2 -> mid
//! decoder: [mid|D] -> res_u1a, attn_u1; [.|C] -> res_u1b; up1;
//!          [.|B] -> res_u0a, attn_u0; [.|A] -> res_u0b; conv_out
//! ```
//!
//! The encoder half (`conv_in` through the middle block) is what the control
//! branch clones.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::blocks::{groups_for, AttnBlock, AttnDims, ResBlock, Upsample};
use crate::error::{bail, Result};
use crate::nn::layers::{timestep_embedding, Conv2d, GroupNorm, Linear};
use crate::nn::params::ParamBuilder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetArch {
    pub latent_channels: usize,
    pub widths: [usize; 2],
    pub heads: usize,
    pub time_dim: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [64, 128],
            heads: 4,
            time_dim: 128,
        }
    }
}

impl UNetArch {
    pub fn validate(&self) -> Result<()> {
        for w in self.widths {
            if w == 0 || w % self.heads != 0 {
                bail!(Config, "unet width {w} must be positive and divisible by {} heads", self.heads);
            }
        }
        if self.latent_channels == 0 || self.time_dim == 0 {
            bail!(Config, "unet latent channels and time dim must be positive");
        }
        Ok(())
    }
}

pub const SKIP_COUNT: usize = 4;

/// Skip features `[A, B, C, D]` and the middle-block output.
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    pub skips: [Tensor; SKIP_COUNT],
    pub mid: Tensor,
    pub temb: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNetEncoder {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_d0: ResBlock,
    attn_d0: AttnBlock,
    down0: Conv2d,
    res_d1: ResBlock,
    attn_d1: AttnBlock,
    res_m1: ResBlock,
    attn_m: AttnBlock,
    res_m2: ResBlock,
    w0: usize,
}

/// Per-block representation cross-attention parameters live under `rca.<block>`.
fn rca_for(rca: Option<&ParamBuilder>, block: &str) -> Option<ParamBuilder> {
    rca.map(|r| r.pp(block))
}

impl UNetEncoder {
    pub fn new(pb: &ParamBuilder, arch: &UNetArch, dims: AttnDims, rca: Option<&ParamBuilder>) -> Result<Self> {
        let [w0, w1] = arch.widths;
        let td = arch.time_dim;
        Ok(Self {
            time1: Linear::new(&pb.pp("time1"), w0, td)?,
            time2: Linear::new(&pb.pp("time2"), td, td)?,
            conv_in: Conv2d::new(&pb.pp("conv_in"), arch.latent_channels, w0, 3, 1)?,
            res_d0: ResBlock::new(&pb.pp("res_d0"), w0, w0, Some(td))?,
            attn_d0: AttnBlock::new(&pb.pp("attn_d0"), w0, dims, rca_for(rca, "attn_d0").as_ref())?,
            down0: Conv2d::new(&pb.pp("down0"), w0, w0, 3, 2)?,
            res_d1: ResBlock::new(&pb.pp("res_d1"), w0, w1, Some(td))?,
            attn_d1: AttnBlock::new(&pb.pp("attn_d1"), w1, dims, rca_for(rca, "attn_d1").as_ref())?,
            res_m1: ResBlock::new(&pb.pp("res_m1"), w1, w1, Some(td))?,
            attn_m: AttnBlock::new(&pb.pp("attn_m"), w1, dims, rca_for(rca, "attn_m").as_ref())?,
            res_m2: ResBlock::new(&pb.pp("res_m2"), w1, w1, Some(td))?,
            w0,
        })
    }

    pub fn time_embedding(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let e = timestep_embedding(&tf, self.w0, dtype)?;
        Ok(self.time2.forward(&self.time1.forward(&e)?.silu()?)?)
    }

    /// `hint`, when given, is added right after `conv_in`.
    pub fn forward(
        &self,
        z: &Tensor,
        t: &[usize],
        text: &Tensor,
        rep: Option<&Tensor>,
        hint: Option<&Tensor>,
    ) -> Result<EncoderFeatures> {
        let temb = self.time_embedding(t, z.dtype())?;
        let mut a = self.conv_in.forward(z)?;
        if let Some(h) = hint {
            a = (a + h)?;
        }
        let b = self.attn_d0.forward(&self.res_d0.forward(&a, Some(&temb))?, text, rep)?;
        let c = self.down0.forward(&b)?;
        let d = self.attn_d1.forward(&self.res_d1.forward(&c, Some(&temb))?, text, rep)?;
        let m = self.res_m1.forward(&d, Some(&temb))?;
        let m = self.attn_m.forward(&m, text, rep)?;
        let mid = self.res_m2.forward(&m, Some(&temb))?;
        Ok(EncoderFeatures {
            skips: [a, b, c, d],
            mid,
            temb,
        })
    }
}

#[derive(Debug, Clone)]
pub struct UNetDecoder {
    res_u1a: ResBlock,
    attn_u1: AttnBlock,
    res_u1b: ResBlock,
    up1: Upsample,
    res_u0a: ResBlock,
    attn_u0: AttnBlock,
    res_u0b: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNetDecoder {
    pub fn new(pb: &ParamBuilder, arch: &UNetArch, dims: AttnDims, rca: Option<&ParamBuilder>) -> Result<Self> {
        let [w0, w1] = arch.widths;
        let td = Some(arch.time_dim);
        Ok(Self {
            res_u1a: ResBlock::new(&pb.pp("res_u1a"), w1 + w1, w1, td)?,
            attn_u1: AttnBlock::new(&pb.pp("attn_u1"), w1, dims, rca_for(rca, "attn_u1").as_ref())?,
            res_u1b: ResBlock::new(&pb.pp("res_u1b"), w1 + w0, w1, td)?,
            up1: Upsample::new(&pb.pp("up1"), w1, w1)?,
            res_u0a: ResBlock::new(&pb.pp("res_u0a"), w1 + w0, w0, td)?,
            attn_u0: AttnBlock::new(&pb.pp("attn_u0"), w0, dims, rca_for(rca, "attn_u0").as_ref())?,
            res_u0b: ResBlock::new(&pb.pp("res_u0b"), w0 + w0, w0, td)?,
            norm_out: GroupNorm::new(&pb.pp("norm_out"), groups_for(w0), w0)?,
            conv_out: Conv2d::new(&pb.pp("conv_out"), w0, arch.latent_channels, 3, 1)?,
        })
    }

    pub fn forward(&self, f: &EncoderFeatures, text: &Tensor, rep: Option<&Tensor>) -> Result<Tensor> {
        let [a, b, c, d] = &f.skips;
        let t = Some(&f.temb);
        let u = self.res_u1a.forward(&Tensor::cat(&[&f.mid, d], 1)?, t)?;
        let u = self.attn_u1.forward(&u, text, rep)?;
        let u = self.res_u1b.forward(&Tensor::cat(&[&u, c], 1)?, t)?;
        let u = self.up1.forward(&u)?;
        let u = self.res_u0a.forward(&Tensor::cat(&[&u, b], 1)?, t)?;
        let u = self.attn_u0.forward(&u, text, rep)?;
        let u = self.res_u0b.forward(&Tensor::cat(&[&u, a], 1)?, t)?;
        Ok(self.conv_out.forward(&self.norm_out.forward(&u)?.silu()?)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub arch: UNetArch,
    pub encoder: UNetEncoder,
    pub decoder: UNetDecoder,
}

impl UNet {
    /// Parameters under `pb` (`encoder.*`, `decoder.*`); RCA parameters, when
    /// requested, under `rca` with the same block names.
    pub fn new(pb: &ParamBuilder, arch: &UNetArch, dims: AttnDims, rca: Option<&ParamBuilder>) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            encoder: UNetEncoder::new(&pb.pp("encoder"), arch, dims, rca.map(|r| r.pp("encoder")).as_ref())?,
            decoder: UNetDecoder::new(&pb.pp("decoder"), arch, dims, rca.map(|r| r.pp("decoder")).as_ref())?,
        })
    }

    pub fn check_latent(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        if c != self.arch.latent_channels || h % 2 != 0 || w % 2 != 0 {
            bail!(
                Argument,
                "latent {:?} needs {} channels and even spatial size",
                z.dims(),
                self.arch.latent_channels
            );
        }
        Ok(())
    }

    pub fn forward(&self, z: &Tensor, t: &[usize], text: &Tensor, rep: Option<&Tensor>) -> Result<Tensor> {
        self.forward_with(z, t, text, rep, |_| Ok(()))
    }

    /// Runs the encoder, lets `adjust` add residuals to the skip and middle
    /// features, then runs the decoder.
    pub fn forward_with(
        &self,
        z: &Tensor,
        t: &[usize],
        text: &Tensor,
        rep: Option<&Tensor>,
        adjust: impl FnOnce(&mut EncoderFeatures) -> Result<()>,
    ) -> Result<Tensor> {
        self.check_latent(z)?;
        if t.len() != z.dim(0)? {
            bail!(Argument, "{} timesteps for a batch of {}", t.len(), z.dim(0)?);
        }
        let mut f = self.encoder.forward(z, t, text, rep, None)?;
        adjust(&mut f)?;
        self.decoder.forward(&f, text, rep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::Device;

    fn arch() -> UNetArch {
        UNetArch {
            latent_channels: 2,
            widths: [8, 16],
            heads: 2,
            time_dim: 16,
        }
    }

    const DIMS: AttnDims = AttnDims {
        heads: 2,
        text_dim: 6,
        rep_dim: 5,
    };

    #[test]
    fn output_matches_latent_shape() {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, DType::F32);
        let u = UNet::new(&pb, &arch(), DIMS, None).unwrap();
        let z = Tensor::ones((3, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let text = Tensor::ones((3, 4, 6), DType::F32, &Device::Cpu).unwrap();
        let y = u.forward(&z, &[1, 50, 999], &text, None).unwrap();
        assert_eq!(y.dims(), z.dims());
        assert!(u.forward(&z, &[1, 2], &text, None).is_err());
    }

    #[test]
    fn fresh_rca_is_a_no_op() {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, DType::F32);
        let plain = UNet::new(&pb.pp("unet"), &arch(), DIMS, None).unwrap();
        let store2 = ParamStore::new();
        let pb2 = ParamBuilder::new(&store2, 0, DType::F32);
        let with = UNet::new(&pb2.pp("unet"), &arch(), DIMS, Some(&pb2.pp("rca"))).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 2, 8, 8), &Device::Cpu).unwrap();
        let text = Tensor::randn(0f32, 1.0, (2, 4, 6), &Device::Cpu).unwrap();
        let rep = Tensor::randn(0f32, 1.0, (2, 3, 5), &Device::Cpu).unwrap();
        let a = plain.forward(&z, &[10, 20], &text, None).unwrap();
        let b = with.forward(&z, &[10, 20], &text, Some(&rep)).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(with.forward(&z, &[10, 20], &text, None).is_err());
    }
}
