//! Residual and attention blocks shared by the VAE and the UNet.

use candle_core::{Module, Tensor};

use crate::error::{bail, Result};
use crate::nn::layers::{from_tokens, to_tokens, Attention, Conv2d, GroupNorm, LayerNorm, Linear};
use crate::nn::params::ParamBuilder;

pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, time_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&pb.pp("norm1"), groups_for(c_in), c_in)?,
            conv1: Conv2d::new(&pb.pp("conv1"), c_in, c_out, 3, 1)?,
            time: match time_dim {
                Some(d) => Some(Linear::new(&pb.pp("time"), d, c_out)?),
                None => None,
            },
            norm2: GroupNorm::new(&pb.pp("norm2"), groups_for(c_out), c_out)?,
            conv2: Conv2d::new(&pb.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&pb.pp("skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(t)) = (&self.time, temb) {
            let t = proj.forward(&t.silu()?)?;
            let (b, c) = t.dims2()?;
            h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Spatial transformer block: self-attention, then text cross-attention, then
/// (when present) representation cross-attention, then a feed-forward layer.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    norm: GroupNorm,
    proj_in: Linear,
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_text: LayerNorm,
    text_attn: Attention,
    rca: Option<(LayerNorm, Attention)>,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub heads: usize,
    pub text_dim: usize,
    pub rep_dim: usize,
}

impl AttnBlock {
    /// `rca`, when given, holds the representation cross-attention parameters;
    /// its output projection starts at zero.
    pub fn new(pb: &ParamBuilder, c: usize, dims: AttnDims, rca: Option<&ParamBuilder>) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&pb.pp("norm"), groups_for(c), c)?,
            proj_in: Linear::new(&pb.pp("proj_in"), c, c)?,
            ln_self: LayerNorm::new(&pb.pp("ln_self"), c)?,
            self_attn: Attention::new(&pb.pp("self_attn"), c, c, dims.heads, false)?,
            ln_text: LayerNorm::new(&pb.pp("ln_text"), c)?,
            text_attn: Attention::new(&pb.pp("text_attn"), c, dims.text_dim, dims.heads, false)?,
            rca: match rca {
                Some(r) => Some((
                    LayerNorm::new(&r.pp("ln"), c)?,
                    Attention::new(&r.pp("attn"), c, dims.rep_dim, dims.heads, true)?,
                )),
                None => None,
            },
            ln_ff: LayerNorm::new(&pb.pp("ln_ff"), c)?,
            ff1: Linear::new(&pb.pp("ff1"), c, 2 * c)?,
            ff2: Linear::new(&pb.pp("ff2"), 2 * c, c)?,
            proj_out: Linear::new(&pb.pp("proj_out"), c, c)?,
        })
    }

    pub fn has_rca(&self) -> bool {
        self.rca.is_some()
    }

    pub fn forward(&self, x: &Tensor, text: &Tensor, rep: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut t = self.proj_in.forward(&to_tokens(&self.norm.forward(x)?)?)?;
        let n = self.ln_self.forward(&t)?;
        t = (&t + self.self_attn.forward(&n, &n)?)?;
        t = (&t + self.text_attn.forward(&self.ln_text.forward(&t)?, text)?)?;
        if let Some((ln, attn)) = &self.rca {
            let Some(rep) = rep else {
                bail!(Argument, "representation cross-attention needs a soft prompt");
            };
            t = (&t + attn.forward(&ln.forward(&t)?, rep)?)?;
        }
        let ff = self.ff2.forward(&self.ff1.forward(&self.ln_ff.forward(&t)?)?.gelu_erf()?)?;
        t = (t + ff)?;
        let out = from_tokens(&self.proj_out.forward(&t)?, h, w)?;
        Ok((x + out)?)
    }
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), c_in, c_out, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}
