//! Small multi-label tagger: a convolutional encoder that emits a sequence of
//! representation vectors, followed by a linear tagging head.
//!
//! The same network backs both the frozen teacher and the degradation-aware
//! student in [`crate::dape`]; the student adds low-rank adapters to every
//! encoder convolution and attention projection.

use candle_core::{DType, Module, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ComponentKind};
use crate::degradation::bicubic;
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::nn::layers::{bce_with_logits, softmax_last, LayerNorm, LoraConv2d, LoraLinear};
use crate::nn::params::{ParamBuilder, ParamStore};
use crate::tags::{decode_tags, TagSet, TagVocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaggerArch {
    pub input_size: usize,
    pub stem_width: usize,
    /// One stride-2 stage per entry.
    pub stage_widths: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
}

impl Default for TaggerArch {
    fn default() -> Self {
        Self {
            input_size: 64,
            stem_width: 16,
            stage_widths: vec![32, 48, 64, 64],
            embed_dim: 64,
            heads: 4,
        }
    }
}

impl TaggerArch {
    pub fn grid(&self) -> usize {
        self.input_size >> self.stage_widths.len()
    }

    /// Sequence length S of the representation embedding.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            bail!(Config, "tagger needs at least one stage");
        }
        if self.input_size % (1 << self.stage_widths.len()) != 0 || self.grid() == 0 {
            bail!(
                Config,
                "input size {} does not reduce evenly over {} stages",
                self.input_size,
                self.stage_widths.len()
            );
        }
        if self.embed_dim % self.heads != 0 {
            bail!(Config, "embed_dim {} not divisible by {} heads", self.embed_dim, self.heads);
        }
        Ok(())
    }
}

/// Where the low-rank adapters go and how the head is tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadTuning {
    /// Head weights are trained directly.
    Full,
    /// Head is frozen and receives its own adapter.
    Lora,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterSpec {
    pub rank: usize,
    pub head: HeadTuning,
}

struct TokenAttention {
    norm: LayerNorm,
    q: LoraLinear,
    k: LoraLinear,
    v: LoraLinear,
    out: LoraLinear,
    heads: usize,
}

impl TokenAttention {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let h = self.norm.forward(x)?;
        let split = |t: Tensor| -> candle_core::Result<Tensor> {
            t.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let attn = softmax_last(&(q.matmul(&k.t()?.contiguous()?)? * scale)?)?;
        let o = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        x + self.out.forward(&o)?
    }
}

/// Encoder + tagging head.
pub struct TagModel {
    arch: TaggerArch,
    num_classes: usize,
    stem: LoraConv2d,
    stages: Vec<(LoraConv2d, LoraConv2d)>,
    proj: LoraConv2d,
    attn: TokenAttention,
    head: LoraLinear,
}

#[derive(Debug, Clone)]
pub struct TagOutput {
    /// `(B, S, D)`
    pub rep: Tensor,
    /// `(B, C)`
    pub logits: Tensor,
}

impl TagModel {
    /// `base` supplies encoder weights, `head` the tagging head; `adapters`
    /// injects low-rank pairs under `lora.*`.
    pub fn build(
        arch: &TaggerArch,
        num_classes: usize,
        base: &ParamBuilder,
        head: &ParamBuilder,
        adapters: Option<(&ParamBuilder, AdapterSpec)>,
    ) -> Result<Self> {
        arch.validate()?;
        let enc = base.pp("encoder");
        let ad = |name: &str| adapters.map(|(pb, spec)| (pb.pp(format!("lora.{name}")), spec.rank));
        macro_rules! lora_conv {
            ($name:expr, $cin:expr, $cout:expr, $k:expr, $s:expr) => {{
                let a = ad(&$name);
                LoraConv2d::new(&enc.pp(&$name), a.as_ref().map(|(p, r)| (p, *r)), $cin, $cout, $k, $s)?
            }};
        }
        macro_rules! lora_lin {
            ($pb:expr, $i:expr, $o:expr, $a:expr) => {{
                let a = $a;
                LoraLinear::new(&$pb, a.as_ref().map(|(p, r)| (p, *r)), $i, $o)?
            }};
        }
        let stem = lora_conv!("stem".to_string(), 3, arch.stem_width, 3, 1);
        let mut stages = Vec::new();
        let mut c = arch.stem_width;
        for (i, &w) in arch.stage_widths.iter().enumerate() {
            let down = lora_conv!(format!("stage{i}.down"), c, w, 3, 2);
            let conv = lora_conv!(format!("stage{i}.conv"), w, w, 3, 1);
            stages.push((down, conv));
            c = w;
        }
        let proj = lora_conv!("proj".to_string(), c, arch.embed_dim, 1, 1);
        let d = arch.embed_dim;
        let attn = TokenAttention {
            norm: LayerNorm::new(&enc.pp("attn.norm"), d)?,
            q: lora_lin!(enc.pp("attn.q"), d, d, ad("attn.q")),
            k: lora_lin!(enc.pp("attn.k"), d, d, ad("attn.k")),
            v: lora_lin!(enc.pp("attn.v"), d, d, ad("attn.v")),
            out: lora_lin!(enc.pp("attn.out"), d, d, ad("attn.out")),
            heads: arch.heads,
        };
        let head_adapter = match adapters {
            Some((pb, spec)) if spec.head == HeadTuning::Lora => Some((pb.pp("lora.head"), spec.rank)),
            _ => None,
        };
        let head = lora_lin!(head.pp("head"), d, num_classes, head_adapter);
        Ok(Self {
            arch: arch.clone(),
            num_classes,
            stem,
            stages,
            proj,
            attn,
            head,
        })
    }

    pub fn arch(&self) -> &TaggerArch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `x: (B, 3, input, input)` in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<TagOutput> {
        let mut h = self.stem.forward(&((x * 2.0)? - 1.0)?)?.silu()?;
        for (down, conv) in &self.stages {
            h = down.forward(&h)?.silu()?;
            h = (&h + conv.forward(&h)?.silu()?)?;
        }
        let h = self.proj.forward(&h)?;
        let (b, d, gh, gw) = h.dims4()?;
        let tokens = h.reshape((b, d, gh * gw))?.transpose(1, 2)?.contiguous()?;
        let rep = self.attn.forward(&tokens)?;
        let pooled = rep.mean(1)?;
        let logits = self.head.forward(&pooled)?;
        Ok(TagOutput { rep, logits })
    }

    pub fn prepare(&self, images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let n = self.arch.input_size;
        let resized: Vec<ImageTensor> = images
            .iter()
            .map(|im| {
                if im.height() == n && im.width() == n {
                    Ok((*im).clone())
                } else {
                    bicubic(im, n, n).map(ImageTensor::clamp01)
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&ImageTensor> = resized.iter().collect();
        ImageTensor::batch_to_tensor(&refs, dtype, &candle_core::Device::Cpu)
    }
}

/// Plain per-image embeddings, detached from any graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub seq_len: usize,
    pub dim: usize,
    /// Row-major `S x D`.
    pub rep: Vec<f32>,
    pub logits: Vec<f32>,
}

impl Embeddings {
    pub fn rep_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.rep, (self.seq_len, self.dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn zeros(seq_len: usize, dim: usize) -> Self {
        Self {
            seq_len,
            dim,
            rep: vec![0.0; seq_len * dim],
            logits: Vec::new(),
        }
    }
}

pub(crate) fn split_outputs(out: &TagOutput) -> Result<Vec<Embeddings>> {
    let (b, s, d) = out.rep.dims3()?;
    let rep = out.rep.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    let logits = out.logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok((0..b)
        .map(|i| Embeddings {
            seq_len: s,
            dim: d,
            rep: rep[i].iter().flatten().copied().collect(),
            logits: logits[i].clone(),
        })
        .collect())
}

/// A frozen tagger ready for inference.
pub struct TagTeacher {
    model: TagModel,
    store: ParamStore,
    vocab: TagVocabulary,
    dtype: DType,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaggerHyper {
    pub arch: TaggerArch,
    pub vocabulary: TagVocabulary,
}

impl TagTeacher {
    pub fn init(arch: &TaggerArch, vocab: TagVocabulary, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, seed, dtype);
        let model = TagModel::build(arch, vocab.len(), &pb, &pb, None)?;
        Ok(Self { model, store, vocab, dtype })
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if ck.kind != ComponentKind::Teacher {
            bail!(State, "expected a teacher checkpoint, got {}", ck.kind);
        }
        let hyper: TaggerHyper = ck.hyper_as()?;
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, dtype)
            .trainable(false)
            .with_source(ck.tensors.clone());
        let model = TagModel::build(&hyper.arch, hyper.vocabulary.len(), &pb, &pb, None)?;
        Ok(Self {
            model,
            store,
            vocab: hyper.vocabulary,
            dtype,
        })
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let hyper = TaggerHyper {
            arch: self.model.arch.clone(),
            vocabulary: self.vocab.clone(),
        };
        let mut ck = Checkpoint::new(ComponentKind::Teacher, serde_json::to_value(hyper)?, self.store.tensors());
        ck.step = step;
        Ok(ck)
    }

    pub fn model(&self) -> &TagModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vocabulary(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn forward_images(&self, images: &[&ImageTensor]) -> Result<TagOutput> {
        let x = self.model.prepare(images, self.dtype)?;
        self.model.forward(&x)
    }

    /// Representation and logits embeddings for each image.
    pub fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Embeddings>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        split_outputs(&self.forward_images(images)?)
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<Embeddings> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn tags(&self, image: &ImageTensor, threshold: f64) -> Result<TagSet> {
        decode_tags(&self.encode(image)?.logits, &self.vocab, threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub threshold: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 16,
            iterations: 600,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggingEval {
    pub bce: f64,
    /// Fraction of images whose decoded tag set equals the ground truth.
    pub exact_match: f64,
    pub mean_jaccard: f64,
}

pub fn evaluate_tagger(
    forward: impl Fn(&[&ImageTensor]) -> Result<TagOutput>,
    vocab: &TagVocabulary,
    images: &[ImageTensor],
    truths: &[TagSet],
    threshold: f64,
) -> Result<TaggingEval> {
    if images.is_empty() {
        bail!(Argument, "empty evaluation set");
    }
    let mut bce = 0.0;
    let mut exact = 0usize;
    let mut jac = 0.0;
    for (chunk, tchunk) in images.chunks(32).zip(truths.chunks(32)) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let out = forward(&refs)?;
        let dtype = out.logits.dtype();
        let targets = multi_hot_tensor(tchunk, vocab.len(), dtype)?;
        bce += bce_with_logits(&out.logits, &targets)?
            .to_dtype(DType::F64)?
            .sum_all()?
            .to_scalar::<f64>()?;
        for (emb, truth) in split_outputs(&out)?.iter().zip(tchunk) {
            let pred = decode_tags(&emb.logits, vocab, threshold)?;
            if pred.indices() == truth.indices() {
                exact += 1;
            }
            jac += pred.jaccard(truth);
        }
    }
    let n = images.len() as f64;
    Ok(TaggingEval {
        bce: bce / (n * vocab.len() as f64),
        exact_match: exact as f64 / n,
        mean_jaccard: jac / n,
    })
}

pub(crate) fn multi_hot_tensor(tags: &[TagSet], classes: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = tags.iter().flat_map(|t| t.multi_hot(classes)).collect();
    Ok(Tensor::from_vec(data, (tags.len(), classes), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherReport {
    pub initial: TaggingEval,
    pub final_eval: TaggingEval,
    pub losses: Vec<(usize, f64)>,
}

/// Multi-label BCE training of a fresh tagger on `(image, tags)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn train_teacher(
    arch: &TaggerArch,
    vocab: &TagVocabulary,
    train_images: &[ImageTensor],
    train_tags: &[TagSet],
    heldout_images: &[ImageTensor],
    heldout_tags: &[TagSet],
    cfg: &TeacherTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(TagTeacher, TeacherReport)> {
    if train_images.is_empty() {
        bail!(Argument, "teacher training set is empty");
    }
    if train_images.len() != train_tags.len() || heldout_images.len() != heldout_tags.len() {
        bail!(Argument, "image and tag lists differ in length");
    }
    for t in train_tags.iter().chain(heldout_tags) {
        t.check_vocabulary(vocab)?;
    }
    let teacher = TagTeacher::init(arch, vocab.clone(), seed, DType::F32)?;
    let eval = |t: &TagTeacher| -> Result<TaggingEval> {
        if heldout_images.is_empty() {
            evaluate_tagger(|im| t.forward_images(im), vocab, train_images, train_tags, cfg.threshold)
        } else {
            evaluate_tagger(|im| t.forward_images(im), vocab, heldout_images, heldout_tags, cfg.threshold)
        }
    };
    let initial = eval(&teacher)?;
    let mut opt = candle_nn::AdamW::new(
        teacher.store.trainable_vars(),
        candle_nn::ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e5);
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::new();
    for step in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train_images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let imgs: Vec<&ImageTensor> = batch.iter().map(|&i| &train_images[i]).collect();
        let tags: Vec<TagSet> = batch.iter().map(|&i| train_tags[i].clone()).collect();
        let out = teacher.forward_images(&imgs)?;
        let targets = multi_hot_tensor(&tags, vocab.len(), DType::F32)?;
        let loss = bce_with_logits(&out.logits, &targets)?.mean_all()?;
        opt.backward_step(&loss)?;
        let l = loss.to_scalar::<f32>()? as f64;
        if !l.is_finite() {
            bail!(Numeric, "teacher loss diverged at step {step}");
        }
        on_step(step, l);
        losses.push((step, l));
    }
    let final_eval = eval(&teacher)?;
    Ok((teacher, TeacherReport { initial, final_eval, losses }))
}

/// Sanity helper: mean cosine similarity between two representation sets.
pub fn mean_cosine(a: &Embeddings, b: &Embeddings) -> f64 {
    let dot: f64 = a.rep.iter().zip(&b.rep).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.rep.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.rep.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-30)
}
