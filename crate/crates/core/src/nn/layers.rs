use candle_core::{DType, Module, Tensor, D};

use super::conv::conv2d;
pub use super::softmax::softmax_last;
use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::FanIn { fan_in: in_dim, gain: 1.0 })?;
        let bias = pb.get("bias", &[out_dim], Init::FanIn { fan_in: in_dim, gain: 1.0 })?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn no_bias(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::FanIn { fan_in: in_dim, gain: 1.0 })?;
        Ok(Self { weight, bias: None })
    }

    /// Weight and bias start at exactly zero.
    pub fn zeroed(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::Zeros)?;
        let bias = pb.get("bias", &[out_dim], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = pb.get("weight", &[c_out, c_in, k, k], Init::FanIn { fan_in, gain: 1.0 })?;
        let bias = pb.get("bias", &[c_out], Init::FanIn { fan_in, gain: 1.0 })?;
        Ok(Self { weight, bias: Some(bias), stride, pad: k / 2 })
    }

    pub fn no_bias(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = c_in * k * k;
        let weight = pb.get("weight", &[c_out, c_in, k, k], Init::FanIn { fan_in, gain: 1.0 })?;
        Ok(Self { weight, bias: None, stride, pad: k / 2 })
    }

    /// 1x1 or kxk convolution whose weight and bias start at exactly zero.
    pub fn zeroed(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let weight = pb.get("weight", &[c_out, c_in, k, k], Init::Zeros)?;
        let bias = pb.get("bias", &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias), stride: 1, pad: k / 2 })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            crate::error::bail!(Config, "{channels} channels do not split into {groups} groups");
        }
        Ok(Self {
            groups,
            gamma: pb.get("weight", &[channels], Init::Ones)?,
            beta: pb.get("bias", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.get("weight", &[dim], Init::Ones)?,
            beta: pb.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// Low-rank residual `up(down(x)) * alpha / rank` with `up` starting at zero.
#[derive(Debug, Clone)]
pub struct LoraConv2d {
    base: Conv2d,
    adapter: Option<(Conv2d, Conv2d, f64)>,
}

impl LoraConv2d {
    /// `base` holds the frozen weights; `adapter`, when given, the trainable low-rank pair.
    pub fn new(
        base: &ParamBuilder,
        adapter: Option<(&ParamBuilder, usize)>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv = Conv2d::new(base, c_in, c_out, k, stride)?;
        let adapter = match adapter {
            Some((pb, rank)) => {
                let down = Conv2d::no_bias(&pb.pp("down"), c_in, rank, k, stride)?;
                let up = Conv2d::no_bias_zeroed(&pb.pp("up"), rank, c_out)?;
                Some((down, up, 1.0))
            }
            None => None,
        };
        Ok(Self { base: conv, adapter })
    }
}

impl Conv2d {
    fn no_bias_zeroed(pb: &ParamBuilder, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = pb.get("weight", &[c_out, c_in, 1, 1], Init::Zeros)?;
        Ok(Self { weight, bias: None, stride: 1, pad: 0 })
    }
}

impl Module for LoraConv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            Some((down, up, scale)) => y + (up.forward(&down.forward(x)?)? * *scale)?,
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoraLinear {
    base: Linear,
    adapter: Option<(Linear, Linear, f64)>,
}

impl LoraLinear {
    pub fn new(
        base: &ParamBuilder,
        adapter: Option<(&ParamBuilder, usize)>,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let lin = Linear::new(base, in_dim, out_dim)?;
        let adapter = match adapter {
            Some((pb, rank)) => {
                let down = Linear::no_bias(&pb.pp("down"), in_dim, rank)?;
                let w = pb.pp("up").get("weight", &[out_dim, rank], Init::Zeros)?;
                Some((down, Linear { weight: w, bias: None }, 1.0))
            }
            None => None,
        };
        Ok(Self { base: lin, adapter })
    }
}

impl Module for LoraLinear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            Some((down, up, scale)) => y + (up.forward(&down.forward(x)?)? * *scale)?,
            None => Ok(y),
        }
    }
}

/// Multi-head attention of `x: (B, N, dim)` over `context: (B, M, ctx_dim)`.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(pb: &ParamBuilder, dim: usize, ctx_dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if dim % heads != 0 {
            crate::error::bail!(Config, "attention width {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q: Linear::no_bias(&pb.pp("to_q"), dim, dim)?,
            k: Linear::no_bias(&pb.pp("to_k"), ctx_dim, dim)?,
            v: Linear::no_bias(&pb.pp("to_v"), ctx_dim, dim)?,
            out: if zero_out {
                Linear::zeroed(&pb.pp("to_out"), dim, dim)?
            } else {
                Linear::new(&pb.pp("to_out"), dim, dim)?
            },
            heads,
        })
    }

    fn split_heads(&self, t: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = t.dims3()?;
        t.reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    pub fn forward(&self, x: &Tensor, context: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.out.forward(&o)
    }
}


pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Elementwise `BCE(sigmoid(logits), targets)`, stable for large |logits|.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    // max(x, 0) - x*y + log(1 + exp(-|x|))
    let softplus_tail = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    (logits.relu()? - (logits * targets)?)? + softplus_tail
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `(B,) -> (B, dim)`.
pub fn timestep_embedding(t: &[f64], dim: usize, dtype: DType) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tt in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((tt * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((tt * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_vec(data, (t.len(), dim), &candle_core::Device::Cpu)?.to_dtype(dtype)
}

/// `(B, C, H, W) -> (B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()
}

/// `(B, H*W, C) -> (B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> candle_core::Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use candle_core::Device;

    #[test]
    fn bce_matches_naive_formula() {
        let x = Tensor::new(&[-3.0f64, -0.5, 0.0, 2.0, 30.0], &Device::Cpu).unwrap();
        let y = Tensor::new(&[0.1f64, 0.9, 0.5, 1.0, 0.0], &Device::Cpu).unwrap();
        let got = bce_with_logits(&x, &y).unwrap().to_vec1::<f64>().unwrap();
        for (i, (xv, yv)) in [(-3.0f64, 0.1f64), (-0.5, 0.9), (0.0, 0.5), (2.0, 1.0), (30.0, 0.0)]
            .iter()
            .enumerate()
        {
            let p = 1.0 / (1.0 + (-xv).exp());
            let want = if *xv > 20.0 {
                *xv // log(1 - p) underflows; limit is x
            } else {
                -(yv * p.ln() + (1.0 - yv) * (1.0 - p).ln())
            };
            assert!((got[i] - want).abs() < 1e-9, "{i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [100.0, 100.0, -100.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn fresh_lora_is_a_no_op() {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 1, DType::F32);
        let plain = Conv2d::new(&pb.pp("conv"), 3, 4, 3, 1).unwrap();
        let store2 = ParamStore::new();
        let pb2 = ParamBuilder::new(&store2, 1, DType::F32);
        let lora = LoraConv2d::new(&pb2.pp("conv"), Some((&pb2.pp("lora"), 2)), 3, 4, 3, 1).unwrap();
        let x = Tensor::ones((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let a = plain.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = lora.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 1, DType::F64);
        let gn = GroupNorm::new(&pb, 2, 4).unwrap();
        let x = Tensor::arange(0f64, 64.0, &Device::Cpu).unwrap().reshape((1, 4, 4, 4)).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 32)).unwrap();
        let m = y.mean(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-9));
    }
}
