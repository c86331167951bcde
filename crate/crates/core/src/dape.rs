//! Degradation-aware prompt extractor.
//!
//! A copy of the tag teacher whose encoder receives low-rank adapters. It is
//! trained so that its outputs on a degraded image match the frozen teacher's
//! outputs on the clean original, and at inference it turns an LR image into a
//! [`PromptBundle`]: decoded tags (hard prompt) plus the representation
//! sequence (soft prompt).

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ComponentKind};
use crate::degradation::{synthesize_batch, DegradationConfig};
use crate::error::{bail, Error, Result};
use crate::image::ImageTensor;
use crate::nn::layers::{bce_with_logits, sigmoid};
use crate::nn::params::{ParamBuilder, ParamStore};
use crate::parallel::Execution;
use crate::tags::{decode_tags, TagSet, TagVocabulary};
use crate::teacher::{split_outputs, AdapterSpec, Embeddings, HeadTuning, TagModel, TagOutput, TagTeacher, TaggerArch, TaggerHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DapeTrainConfig {
    pub lambda: f64,
    pub lora_rank: usize,
    pub head: HeadTuning,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub threshold: f64,
    /// Number of held-out HR images degraded once with fixed seeds.
    pub heldout: usize,
}

impl Default for DapeTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lora_rank: 8,
            head: HeadTuning::Full,
            learning_rate: 1e-3,
            batch_size: 16,
            iterations: 800,
            threshold: 0.5,
            heldout: 64,
        }
    }
}

impl DapeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bail!(Config, "dape lambda must be finite and >= 0, got {}", self.lambda);
        }
        if self.lora_rank == 0 {
            bail!(Config, "lora_rank must be >= 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "dape batch_size must be >= 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            bail!(Config, "threshold {} outside (0, 1)", self.threshold);
        }
        Ok(())
    }
}

/// Graph-carrying loss terms; `total = rep + lambda * logits`.
#[derive(Debug, Clone)]
pub struct DapeLoss {
    pub total: Tensor,
    pub rep: Tensor,
    pub logits: Tensor,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DapeLossValue {
    pub total: f64,
    pub rep_term: f64,
    pub logits_term: f64,
}

impl DapeLoss {
    /// Scalar readout; `total` is recomposed in f64 so the decomposition is exact.
    pub fn value(&self) -> Result<DapeLossValue> {
        let rep_term = scalar(&self.rep)?;
        let logits_term = scalar(&self.logits)?;
        Ok(DapeLossValue {
            total: rep_term + self.lambda * logits_term,
            rep_term,
            logits_term,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        bail!(Numeric, "non-finite values in {what}");
    }
    Ok(())
}

/// Mean-squared representation error plus `lambda` times the per-class BCE of the
/// student logits against the teacher's sigmoid probabilities. Teacher inputs
/// are detached.
pub fn dape_loss(
    student_rep: &Tensor,
    student_logits: &Tensor,
    teacher_rep: &Tensor,
    teacher_logits: &Tensor,
    lambda: f64,
) -> Result<DapeLoss> {
    if student_rep.dims() != teacher_rep.dims() {
        bail!(
            Argument,
            "representation shapes differ: student {:?}, teacher {:?}",
            student_rep.dims(),
            teacher_rep.dims()
        );
    }
    if student_logits.dims() != teacher_logits.dims() {
        bail!(
            Argument,
            "logit shapes differ: student {:?}, teacher {:?}",
            student_logits.dims(),
            teacher_logits.dims()
        );
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        bail!(Argument, "lambda must be finite and >= 0, got {lambda}");
    }
    for (t, what) in [
        (student_rep, "student representation"),
        (student_logits, "student logits"),
        (teacher_rep, "teacher representation"),
        (teacher_logits, "teacher logits"),
    ] {
        check_finite(t, what)?;
    }
    let rep = (student_rep - teacher_rep.detach())?.sqr()?.mean_all()?;
    let targets = sigmoid(&teacher_logits.detach())?;
    let logits = bce_with_logits(student_logits, &targets)?.mean_all()?;
    let total = (&rep + (&logits * lambda)?)?;
    Ok(DapeLoss { total, rep, logits, lambda })
}

/// Hard prompt plus soft prompt for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub hard_prompt: TagSet,
    /// Comma-joined tag text in vocabulary order.
    pub hard_text: String,
    pub soft_prompt: Embeddings,
}

impl PromptBundle {
    pub fn from_embeddings(emb: Embeddings, vocab: &TagVocabulary, threshold: f64) -> Result<Self> {
        let hard = decode_tags(&emb.logits, vocab, threshold)?;
        Ok(Self {
            hard_text: hard.to_text(vocab),
            hard_prompt: hard,
            soft_prompt: emb,
        })
    }

    /// Empty tag set and an all-zero representation sequence.
    pub fn null(seq_len: usize, dim: usize) -> Self {
        Self {
            hard_prompt: TagSet::empty(),
            hard_text: String::new(),
            soft_prompt: Embeddings::zeros(seq_len, dim),
        }
    }

    pub fn with_hard(mut self, tags: TagSet, vocab: &TagVocabulary) -> Self {
        self.hard_text = tags.to_text(vocab);
        self.hard_prompt = tags;
        self
    }

    pub fn without_hard(self) -> Self {
        Self {
            hard_prompt: TagSet::empty(),
            hard_text: String::new(),
            soft_prompt: self.soft_prompt,
        }
    }

    pub fn without_soft(self) -> Self {
        let (s, d) = (self.soft_prompt.seq_len, self.soft_prompt.dim);
        Self {
            soft_prompt: Embeddings {
                logits: self.soft_prompt.logits,
                ..Embeddings::zeros(s, d)
            },
            ..self
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DapeHyper {
    pub arch: TaggerArch,
    pub vocabulary: TagVocabulary,
    pub lora_rank: usize,
    pub head: HeadTuning,
    /// Checksum of the teacher encoder the adapters were trained against.
    pub teacher_encoder_checksum: String,
    pub train: DapeTrainConfig,
}

pub struct Dape {
    model: TagModel,
    store: ParamStore,
    vocab: TagVocabulary,
    hyper: DapeHyper,
    dtype: DType,
}

pub const ENCODER_PREFIX: &str = "encoder";
pub const ADAPTER_PREFIX: &str = "lora";
pub const HEAD_PREFIX: &str = "head";

impl Dape {
    /// Student initialized from the teacher: encoder frozen, adapters fresh,
    /// head trainable or frozen depending on `cfg.head`.
    pub fn from_teacher(teacher: &Checkpoint, cfg: &DapeTrainConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if teacher.kind != ComponentKind::Teacher {
            bail!(State, "expected a teacher checkpoint, got {}", teacher.kind);
        }
        let th: TaggerHyper = teacher.hyper_as()?;
        let store = ParamStore::new();
        let root = ParamBuilder::new(&store, seed, dtype).with_source(teacher.tensors.clone());
        let base = root.trainable(false);
        let head = root.trainable(cfg.head == HeadTuning::Full);
        let spec = AdapterSpec {
            rank: cfg.lora_rank,
            head: cfg.head,
        };
        let model = TagModel::build(&th.arch, th.vocabulary.len(), &base, &head, Some((&root, spec)))
            .map_err(as_state)?;
        let teacher_encoder_checksum = crate::nn::params::checksum_tensors(
            teacher
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{ENCODER_PREFIX}."))),
        )?;
        let hyper = DapeHyper {
            arch: th.arch,
            vocabulary: th.vocabulary.clone(),
            lora_rank: cfg.lora_rank,
            head: cfg.head,
            teacher_encoder_checksum,
            train: cfg.clone(),
        };
        Ok(Self {
            model,
            store,
            vocab: th.vocabulary,
            hyper,
            dtype,
        })
    }

    /// Fully frozen extractor for inference.
    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType) -> Result<Self> {
        if ck.kind != ComponentKind::Dape {
            bail!(State, "expected a dape checkpoint, got {}", ck.kind);
        }
        let hyper: DapeHyper = ck.hyper_as()?;
        let store = ParamStore::new();
        let pb = ParamBuilder::new(&store, 0, dtype)
            .trainable(false)
            .with_source(ck.tensors.clone());
        let spec = AdapterSpec {
            rank: hyper.lora_rank,
            head: hyper.head,
        };
        let model = TagModel::build(&hyper.arch, hyper.vocabulary.len(), &pb, &pb, Some((&pb, spec)))?;
        Ok(Self {
            model,
            store,
            vocab: hyper.vocabulary.clone(),
            hyper,
            dtype,
        })
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(ComponentKind::Dape, serde_json::to_value(&self.hyper)?, self.store.tensors());
        ck.step = step;
        Ok(ck)
    }

    /// Errors with a state error unless `teacher` has the same architecture and
    /// the same encoder weights this extractor was built on.
    pub fn verify_teacher(&self, teacher: &TagTeacher) -> Result<()> {
        if teacher.model().arch() != &self.hyper.arch || teacher.vocabulary() != &self.vocab {
            bail!(State, "teacher architecture or vocabulary does not match the extractor");
        }
        if teacher.store().checksum(ENCODER_PREFIX)? != self.hyper.teacher_encoder_checksum {
            bail!(State, "teacher encoder weights differ from the ones the extractor was trained on");
        }
        Ok(())
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vocabulary(&self) -> &TagVocabulary {
        &self.vocab
    }

    pub fn hyper(&self) -> &DapeHyper {
        &self.hyper
    }

    pub fn seq_shape(&self) -> (usize, usize) {
        (self.hyper.arch.seq_len(), self.hyper.arch.embed_dim)
    }

    pub fn forward_images(&self, images: &[&ImageTensor]) -> Result<TagOutput> {
        let x = self.model.prepare(images, self.dtype)?;
        self.model.forward(&x)
    }

    pub fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Embeddings>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        split_outputs(&self.forward_images(images)?)
    }

    pub fn extract_prompts(&self, lr: &ImageTensor, threshold: f64) -> Result<PromptBundle> {
        Ok(self.extract_batch(&[lr], threshold)?.remove(0))
    }

    pub fn extract_batch(&self, lrs: &[&ImageTensor], threshold: f64) -> Result<Vec<PromptBundle>> {
        self.encode_batch(lrs)?
            .into_iter()
            .map(|e| PromptBundle::from_embeddings(e, &self.vocab, threshold))
            .collect()
    }

    /// Loss of the student on `lrs` against the teacher on `hrs`.
    pub fn loss_on(&self, teacher: &TagTeacher, hrs: &[&ImageTensor], lrs: &[&ImageTensor], lambda: f64) -> Result<DapeLoss> {
        let t = teacher.forward_images(hrs)?;
        let s = self.forward_images(lrs)?;
        dape_loss(&s.rep, &s.logits, &t.rep, &t.logits, lambda)
    }
}

fn as_state(e: Error) -> Error {
    match e {
        Error::Checkpoint(m) => Error::State(format!("teacher/student mismatch: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DapeEval {
    pub loss: DapeLossValue,
    /// Mean Jaccard overlap of the extractor's tags on LR with the ground truth.
    pub student_jaccard: f64,
    /// Same, for the frozen teacher applied directly to the LR images.
    pub teacher_lr_jaccard: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DapeReport {
    pub initial: DapeEval,
    pub final_eval: DapeEval,
    pub losses: Vec<(usize, DapeLossValue)>,
    pub teacher_checksum_before: String,
    pub teacher_checksum_after: String,
    pub teacher_encoder_checksum: String,
    pub student_encoder_checksum: String,
}

/// Held-out evaluation of the extractor on fixed degraded inputs.
pub fn evaluate_dape(
    dape: &Dape,
    teacher: &TagTeacher,
    hrs: &[ImageTensor],
    lrs: &[ImageTensor],
    truths: &[TagSet],
    lambda: f64,
    threshold: f64,
) -> Result<DapeEval> {
    if hrs.is_empty() || hrs.len() != lrs.len() || hrs.len() != truths.len() {
        bail!(Argument, "held-out set must be non-empty with matching HR, LR and tag lists");
    }
    let (mut rep, mut logit) = (0.0, 0.0);
    let (mut sj, mut tj) = (0.0, 0.0);
    for start in (0..hrs.len()).step_by(32) {
        let end = (start + 32).min(hrs.len());
        let h: Vec<&ImageTensor> = hrs[start..end].iter().collect();
        let l: Vec<&ImageTensor> = lrs[start..end].iter().collect();
        let w = (end - start) as f64;
        let v = dape.loss_on(teacher, &h, &l, lambda)?.value()?;
        rep += v.rep_term * w;
        logit += v.logits_term * w;
        for (p, truth) in dape.extract_batch(&l, threshold)?.iter().zip(&truths[start..end]) {
            sj += p.hard_prompt.jaccard(truth);
        }
        for (e, truth) in teacher.encode_batch(&l)?.iter().zip(&truths[start..end]) {
            tj += decode_tags(&e.logits, teacher.vocabulary(), threshold)?.jaccard(truth);
        }
    }
    let n = hrs.len() as f64;
    let (rep_term, logits_term) = (rep / n, logit / n);
    Ok(DapeEval {
        loss: DapeLossValue {
            total: rep_term + lambda * logits_term,
            rep_term,
            logits_term,
        },
        student_jaccard: sj / n,
        teacher_lr_jaccard: tj / n,
    })
}

pub struct HeldOut<'a> {
    pub hr: &'a [ImageTensor],
    pub lr: &'a [ImageTensor],
    pub tags: &'a [TagSet],
}

/// Trains adapters (and the head, if fully tuned) with degradations drawn on the fly.
#[allow(clippy::too_many_arguments)]
pub fn train_dape(
    teacher_ck: &Checkpoint,
    train_hr: &[ImageTensor],
    heldout: HeldOut<'_>,
    degradation: &DegradationConfig,
    cfg: &DapeTrainConfig,
    seed: u64,
    exec: Execution,
    mut on_step: impl FnMut(usize, &DapeLossValue),
) -> Result<(Dape, DapeReport)> {
    cfg.validate()?;
    degradation.validate()?;
    if train_hr.is_empty() {
        bail!(Argument, "dape training set is empty");
    }
    let teacher = TagTeacher::from_checkpoint(teacher_ck, DType::F32)?;
    let teacher_checksum_before = teacher.store().checksum("")?;
    let dape = Dape::from_teacher(teacher_ck, cfg, seed, DType::F32)?;
    dape.verify_teacher(&teacher)?;

    let initial = evaluate_dape(&dape, &teacher, heldout.hr, heldout.lr, heldout.tags, cfg.lambda, cfg.threshold)?;
    let mut opt = candle_nn::AdamW::new(
        dape.store.trainable_vars(),
        candle_nn::ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda9e);
    let mut losses = Vec::new();
    for step in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train_hr.len())).collect();
        let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| rng.random()).collect();
        let hrs: Vec<ImageTensor> = idx.iter().map(|&i| train_hr[i].clone()).collect();
        let pairs = synthesize_batch(&hrs, degradation, &seeds, exec)?;
        let h: Vec<&ImageTensor> = hrs.iter().collect();
        let l: Vec<&ImageTensor> = pairs.iter().map(|(lr, _)| lr).collect();
        let loss = dape.loss_on(&teacher, &h, &l, cfg.lambda)?;
        opt.backward_step(&loss.total)?;
        let v = loss.value()?;
        if !v.total.is_finite() {
            bail!(Numeric, "dape loss diverged at step {step}");
        }
        on_step(step, &v);
        losses.push((step, v));
    }
    let final_eval = evaluate_dape(&dape, &teacher, heldout.hr, heldout.lr, heldout.tags, cfg.lambda, cfg.threshold)?;
    let report = DapeReport {
        initial,
        final_eval,
        losses,
        teacher_checksum_before,
        teacher_checksum_after: teacher.store().checksum("")?,
        teacher_encoder_checksum: teacher.store().checksum(ENCODER_PREFIX)?,
        student_encoder_checksum: dape.store.checksum(ENCODER_PREFIX)?,
    };
    Ok((dape, report))
}
