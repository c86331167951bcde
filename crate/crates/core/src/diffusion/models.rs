//! The text-conditioned base model and the controlled super-resolution model
//! built on top of it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use super::blocks::AttnDims;
use super::text::{TextConfig, TextEncoder};
use super::unet::{UNet, UNetArch, UNetEncoder, SKIP_COUNT};
use crate::checkpoint::{Checkpoint, ComponentKind};
use crate::dape::PromptBundle;
use crate::degradation::bicubic;
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::nn::layers::Conv2d;
use crate::nn::params::{checksum_tensors, ParamBuilder, ParamStore};
use crate::tags::{TagSet, TagVocabulary};

pub const UNET_PREFIX: &str = "unet";
pub const TEXT_PREFIX: &str = "text";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseHyper {
    pub unet: UNetArch,
    pub text: TextConfig,
    pub vocabulary: TagVocabulary,
}

/// Text-conditioned denoiser that plays the role of the pretrained generative prior.
pub struct BaseModel {
    pub unet: UNet,
    pub text: TextEncoder,
    store: ParamStore,
    hyper: BaseHyper,
}

fn base_dims(hyper: &BaseHyper, rep_dim: usize) -> AttnDims {
    AttnDims {
        heads: hyper.unet.heads,
        text_dim: hyper.text.dim,
        rep_dim,
    }
}

impl BaseModel {
    pub fn init(unet: &UNetArch, text: &TextConfig, vocab: &TagVocabulary, seed: u64, dtype: DType) -> Result<Self> {
        let hyper = BaseHyper {
            unet: unet.clone(),
            text: text.clone(),
            vocabulary: vocab.clone(),
        };
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, seed, dtype);
        let text = TextEncoder::new(&pb.pp(TEXT_PREFIX), vocab, &hyper.text)?;
        let unet = UNet::new(&pb.pp(UNET_PREFIX), unet, base_dims(&hyper, 1), None)?;
        Ok(Self { unet, text, store, hyper })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if ck.kind != ComponentKind::BaseUnet {
            bail!(State, "expected a base-unet checkpoint, got {}", ck.kind);
        }
        let hyper: BaseHyper = ck.hyper_as()?;
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, dtype)
            .trainable(false)
            .with_source(ck.tensors.clone());
        let text = TextEncoder::new(&pb.pp(TEXT_PREFIX), &hyper.vocabulary, &hyper.text)?;
        let unet = UNet::new(&pb.pp(UNET_PREFIX), &hyper.unet, base_dims(&hyper, 1), None)?;
        Ok(Self { unet, text, store, hyper })
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(ComponentKind::BaseUnet, serde_json::to_value(&self.hyper)?, self.store.tensors());
        ck.step = step;
        Ok(ck)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn hyper(&self) -> &BaseHyper {
        &self.hyper
    }

    pub fn predict(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor> {
        self.unet.forward(z_t, t, text, None)
    }

    pub fn encode_tags(&self, tags: &[&TagSet]) -> Result<Tensor> {
        Ok(self.text.encode_batch(tags)?.to_dtype(self.unet_dtype())?)
    }

    fn unet_dtype(&self) -> DType {
        self.text.dtype()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlArch {
    /// Widths of the LR image encoder, finest first; one stride-2 stage per
    /// extra entry, so the length is `log2(vae downscale) + 1`.
    pub lr_encoder_widths: Vec<usize>,
}

impl Default for ControlArch {
    fn default() -> Self {
        Self {
            lr_encoder_widths: vec![16, 32, 32],
        }
    }
}

/// Maps the LR image, upsampled to output size, to a residual at latent
/// resolution; the last convolution starts at zero.
#[derive(Debug, Clone)]
pub struct LrImageEncoder {
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl LrImageEncoder {
    pub fn new(pb: &ParamBuilder, widths: &[usize], out_channels: usize) -> Result<Self> {
        if widths.is_empty() {
            bail!(Config, "lr encoder needs at least one width");
        }
        let mut convs = vec![Conv2d::new(&pb.pp("conv_in"), 3, widths[0], 3, 1)?];
        for i in 1..widths.len() {
            convs.push(Conv2d::new(&pb.pp(format!("down{i}")), widths[i - 1], widths[i], 3, 2)?);
        }
        let out = Conv2d::zeroed(&pb.pp("zero_out"), *widths.last().unwrap(), out_channels, 3)?;
        Ok(Self { convs, out })
    }

    pub fn forward(&self, lr: &Tensor) -> Result<Tensor> {
        let mut h = ((lr * 2.0)? - 1.0)?;
        for c in &self.convs {
            h = c.forward(&h)?.silu()?;
        }
        Ok(self.out.forward(&h)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrHyper {
    pub control: ControlArch,
    pub rep_seq_len: usize,
    pub rep_dim: usize,
    pub vae_downscale: usize,
    /// Checksum of the base checkpoint the control branch was trained against.
    pub base_checksum: String,
}

/// Inputs that condition one denoising call.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(B, 3, H, W)`: LR images upsampled to output size.
    pub lr: Tensor,
    /// `(B, L, text_dim)`
    pub text: Tensor,
    /// `(B, S, D)`
    pub rep: Tensor,
}

impl Conditioning {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.lr.dim(0)?)
    }

    /// Rows `start..start+len`.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            lr: self.lr.narrow(0, start, len)?,
            text: self.text.narrow(0, start, len)?,
            rep: self.rep.narrow(0, start, len)?,
        })
    }
}

pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor>;
}

/// Frozen base model plus a trainable control branch, LR image encoder,
/// zero bridges and representation cross-attention.
pub struct SrModel {
    pub base: BaseModel,
    base_unet_rca: UNet,
    control: UNetEncoder,
    lr_encoder: LrImageEncoder,
    bridges: Vec<Conv2d>,
    trainable: ParamStore,
    frozen: ParamStore,
    hyper: SrHyper,
    dtype: DType,
}

pub const CONTROL_PREFIX: &str = "control";
pub const RCA_PREFIX: &str = "rca";
pub const BRIDGE_PREFIX: &str = "bridge";
pub const LR_ENCODER_PREFIX: &str = "lr_encoder";

impl SrModel {
    /// Control branch cloned from the base encoder, every new output projection at zero.
    pub fn init(
        base_ck: &Checkpoint,
        control: &ControlArch,
        rep_shape: (usize, usize),
        vae_downscale: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let hyper = SrHyper {
            control: control.clone(),
            rep_seq_len: rep_shape.0,
            rep_dim: rep_shape.1,
            vae_downscale,
            base_checksum: checksum_tensors(base_ck.tensors.iter())?,
        };
        let enc_prefix = format!("{UNET_PREFIX}.encoder.");
        let cloned: BTreeMap<String, Tensor> = base_ck
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&enc_prefix)
                    .map(|rest| (format!("{CONTROL_PREFIX}.{rest}"), v.clone()))
            })
            .collect();
        Self::assemble(base_ck, cloned, hyper, seed, dtype, true)
    }

    /// Frozen model from base and control checkpoints.
    pub fn from_checkpoints(base_ck: &Checkpoint, sr_ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if sr_ck.kind != ComponentKind::SrControl {
            bail!(State, "expected an sr-control checkpoint, got {}", sr_ck.kind);
        }
        let hyper: SrHyper = sr_ck.hyper_as()?;
        if checksum_tensors(base_ck.tensors.iter())? != hyper.base_checksum {
            bail!(State, "the base checkpoint differs from the one the control branch was trained on");
        }
        Self::assemble(base_ck, sr_ck.tensors.clone(), hyper, 0, dtype, false)
    }

    fn assemble(
        base_ck: &Checkpoint,
        source: BTreeMap<String, Tensor>,
        hyper: SrHyper,
        seed: u64,
        dtype: DType,
        trainable: bool,
    ) -> Result<Self> {
        let base = BaseModel::from_checkpoint(base_ck, dtype)?;
        let bh = base.hyper().clone();
        let dims = AttnDims {
            heads: bh.unet.heads,
            text_dim: bh.text.dim,
            rep_dim: hyper.rep_dim,
        };
        let frozen = ParamStore::new();
        let fpb = ParamBuilder::new(&frozen, 0, dtype)
            .trainable(false)
            .with_source(base_ck.tensors.clone());
        let train_store = ParamStore::new();
        let tpb = ParamBuilder::new(&train_store, seed, dtype)
            .trainable(trainable)
            .with_source(source);
        let base_unet_rca = UNet::new(&fpb.pp(UNET_PREFIX), &bh.unet, dims, Some(&tpb.pp(RCA_PREFIX)))?;
        let control = UNetEncoder::new(
            &tpb.pp(CONTROL_PREFIX),
            &bh.unet,
            dims,
            Some(&tpb.pp(CONTROL_PREFIX).pp(RCA_PREFIX)),
        )?;
        let [w0, w1] = bh.unet.widths;
        if hyper.control.lr_encoder_widths.len() != hyper.vae_downscale.trailing_zeros() as usize + 1 {
            bail!(
                Config,
                "lr encoder needs {} widths for downscale {}",
                hyper.vae_downscale.trailing_zeros() + 1,
                hyper.vae_downscale
            );
        }
        let lr_encoder = LrImageEncoder::new(&tpb.pp(LR_ENCODER_PREFIX), &hyper.control.lr_encoder_widths, w0)?;
        let widths = [w0, w0, w0, w1, w1];
        let bridges = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::zeroed(&tpb.pp(format!("{BRIDGE_PREFIX}{i}")), c, c, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            base_unet_rca,
            control,
            lr_encoder,
            bridges,
            trainable: train_store,
            frozen,
            hyper,
            dtype,
        })
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(ComponentKind::SrControl, serde_json::to_value(&self.hyper)?, self.trainable.tensors());
        ck.step = step;
        Ok(ck)
    }

    pub fn trainable_store(&self) -> &ParamStore {
        &self.trainable
    }

    /// Base UNet and text encoder parameters as used by this model.
    pub fn frozen_store(&self) -> &ParamStore {
        &self.frozen
    }

    pub fn hyper(&self) -> &SrHyper {
        &self.hyper
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn latent_channels(&self) -> usize {
        self.base.hyper().unet.latent_channels
    }

    /// Builds the conditioning batch: LR images bicubic-upsampled to
    /// `out_size`, text contexts from the hard prompts, soft prompts stacked.
    pub fn condition(&self, lrs: &[&ImageTensor], bundles: &[&PromptBundle], out_size: (usize, usize)) -> Result<Conditioning> {
        if lrs.len() != bundles.len() || lrs.is_empty() {
            bail!(Argument, "{} LR images and {} prompt bundles", lrs.len(), bundles.len());
        }
        let ups = lrs
            .iter()
            .map(|im| bicubic(im, out_size.0, out_size.1).map(ImageTensor::clamp01))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = ups.iter().collect();
        let lr = ImageTensor::batch_to_tensor(&refs, self.dtype, &Device::Cpu)?;
        let tags: Vec<&TagSet> = bundles.iter().map(|b| &b.hard_prompt).collect();
        let text = self.base.encode_tags(&tags)?.to_dtype(self.dtype)?;
        let mut reps = Vec::with_capacity(bundles.len());
        for b in bundles {
            let s = &b.soft_prompt;
            if (s.seq_len, s.dim) != (self.hyper.rep_seq_len, self.hyper.rep_dim) {
                bail!(
                    Argument,
                    "soft prompt is {}x{}, model expects {}x{}",
                    s.seq_len,
                    s.dim,
                    self.hyper.rep_seq_len,
                    self.hyper.rep_dim
                );
            }
            reps.push(s.rep_tensor(self.dtype)?);
        }
        Ok(Conditioning {
            lr,
            text,
            rep: Tensor::stack(&reps, 0)?,
        })
    }

    /// Output of the frozen base model alone, ignoring LR image and soft prompt.
    pub fn base_prediction(&self, z_t: &Tensor, t: &[usize], text: &Tensor) -> Result<Tensor> {
        self.base.predict(z_t, t, text)
    }
}

impl NoisePredictor for SrModel {
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Conditioning) -> Result<Tensor> {
        let b = z_t.dim(0)?;
        if cond.batch_size()? != b || cond.text.dim(0)? != b || cond.rep.dim(0)? != b {
            bail!(Argument, "conditioning batch does not match latent batch {b}");
        }
        let (_, _, h, w) = z_t.dims4()?;
        let (_, _, lh, lw) = cond.lr.dims4()?;
        let s = self.hyper.vae_downscale;
        if lh != h * s || lw != w * s {
            bail!(Argument, "LR conditioning {lh}x{lw} does not match latent {h}x{w} at downscale {s}");
        }
        let hint = self.lr_encoder.forward(&cond.lr)?;
        let ctrl = self.control.forward(z_t, t, &cond.text, Some(&cond.rep), Some(&hint))?;
        self.base_unet_rca.forward_with(z_t, t, &cond.text, Some(&cond.rep), |f| {
            for i in 0..SKIP_COUNT {
                let r = self.bridges[i].forward(&ctrl.skips[i])?;
                f.skips[i] = (&f.skips[i] + r)?;
            }
            f.mid = (&f.mid + self.bridges[SKIP_COUNT].forward(&ctrl.mid)?)?;
            Ok(())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::Embeddings;
    use crate::toydata::toy_vocabulary;

    pub(crate) fn tiny_base() -> BaseModel {
        let arch = UNetArch {
            latent_channels: 2,
            widths: [8, 16],
            heads: 2,
            time_dim: 16,
        };
        let text = TextConfig { dim: 8, context_len: 16 };
        BaseModel::init(&arch, &text, &toy_vocabulary(), 5, DType::F32).unwrap()
    }

    fn bundle(v: f32) -> PromptBundle {
        PromptBundle {
            hard_prompt: TagSet::from_indices([0, 5]),
            hard_text: String::new(),
            soft_prompt: Embeddings {
                seq_len: 4,
                dim: 6,
                rep: (0..24).map(|i| v + i as f32 * 0.1).collect(),
                logits: vec![],
            },
        }
    }

    #[test]
    fn fresh_control_reproduces_the_base_exactly() {
        let base = tiny_base();
        let ck = base.to_checkpoint(0).unwrap();
        let sr = SrModel::init(&ck, &ControlArch { lr_encoder_widths: vec![4, 8, 8] }, (4, 6), 4, 1, DType::F32).unwrap();
        let lr = ImageTensor::from_fn(8, 8, 3, |y, x, c| ((x + y + c) % 5) as f32 / 4.0).unwrap();
        let b = bundle(0.3);
        let cond = sr.condition(&[&lr], &[&b], (32, 32)).unwrap();
        let z = Tensor::randn(0f32, 1.0, (1, 2, 8, 8), &Device::Cpu).unwrap();
        let a = sr.predict_noise(&z, &[321], &cond).unwrap();
        let want = sr.base_prediction(&z, &[321], &cond.text).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            want.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn roundtrip_through_checkpoints() {
        let base = tiny_base();
        let ck = base.to_checkpoint(0).unwrap();
        let sr = SrModel::init(&ck, &ControlArch { lr_encoder_widths: vec![4, 8, 8] }, (4, 6), 4, 1, DType::F32).unwrap();
        let sck = sr.to_checkpoint(3).unwrap();
        let back = SrModel::from_checkpoints(&ck, &sck, DType::F32).unwrap();
        assert_eq!(back.trainable_store().trainable_count(), 0);
        assert_eq!(back.trainable_store().checksum("").unwrap(), sr.trainable_store().checksum("").unwrap());
        let other = BaseModel::init(&base.hyper().unet, &base.hyper().text, &toy_vocabulary(), 6, DType::F32).unwrap();
        assert!(SrModel::from_checkpoints(&other.to_checkpoint(0).unwrap(), &sck, DType::F32).is_err());
    }

    #[test]
    fn mismatched_soft_prompt_is_rejected() {
        let base = tiny_base();
        let sr = SrModel::init(&base.to_checkpoint(0).unwrap(), &ControlArch { lr_encoder_widths: vec![4, 8, 8] }, (3, 6), 4, 1, DType::F32).unwrap();
        let lr = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
        assert!(sr.condition(&[&lr], &[&bundle(0.0)], (32, 32)).is_err());
    }
}
