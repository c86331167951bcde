//! Experiment orchestration. Each command reads its prerequisites from the run
//! directory, writes its artifacts there, and records a manifest listing what
//! it read and wrote.
//!
//! ```text
//! <out_dir>/
//!   dataset/                 make-dataset
//!   checkpoints/<stage>.ckpt train-*
//!   reports/<stage>.json     train-*
//!   infer/<id>.png, .json    infer
//!   eval/report.json         evaluate
//!   ablation/                ablate
//!   manifests/<command>.json
//!   logs/<command>.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::ablation::{inputs_digest, run_ablation, table_csv, table_text, AblationModels, AblationSettings, Benchmark, FLAT_DEVIATION};
use crate::checkpoint::{Checkpoint, ComponentKind};
use crate::config::RunConfig;
use crate::dape::{train_dape, Dape, HeldOut};
use crate::dataset::{make_dataset, Dataset, SplitName};
use crate::degradation::bicubic;
use crate::diffusion::models::SrModel;
use crate::diffusion::train::{train_base, train_sr, LatentSet, SrInputs, SrPairs};
use crate::diffusion::vae::{train_vae, Vae};
use crate::error::{bail, Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{build_report, flat_mask, masked_mean_abs_diff, RunMeta, TaggingInputs};
use crate::rng::derive_seed;
use crate::sampler::{batch_seed, sample_batched, SamplerConfig};
use crate::tags::{sigmoid, TagSet};
use crate::teacher::{train_teacher, Embeddings, TagTeacher};

/// Package version plus `git describe` of the build tree.
pub const VERSION: &str = env!("SEMSR_VERSION");

/// AP convention recorded in every report.
pub const AP_INTERPOLATION: &str = "all-points";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    MakeDataset,
    TrainTeacher,
    TrainVae,
    TrainBase,
    TrainDape,
    TrainSr,
    Infer,
    Evaluate,
    Ablate,
}

impl Command {
    /// Dependency order.
    pub const ALL: [Command; 9] = [
        Command::MakeDataset,
        Command::TrainTeacher,
        Command::TrainVae,
        Command::TrainBase,
        Command::TrainDape,
        Command::TrainSr,
        Command::Infer,
        Command::Evaluate,
        Command::Ablate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::MakeDataset => "make-dataset",
            Command::TrainTeacher => "train-teacher",
            Command::TrainVae => "train-vae",
            Command::TrainBase => "train-base",
            Command::TrainDape => "train-dape",
            Command::TrainSr => "train-sr",
            Command::Infer => "infer",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Command-line overrides. Each applies only to the commands that read it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Training iterations for `train-*`, sampler steps for `infer` and `ablate`.
    pub steps: Option<usize>,
    pub no_lre: bool,
    pub threshold: Option<f64>,
    /// Comma-separated tags replacing every extracted hard prompt in `infer`.
    pub prompt_override: Option<String>,
    /// Directory holding checkpoints for `infer`, instead of the run's own.
    pub checkpoints: Option<PathBuf>,
    /// Directory of LR PNGs for `infer`, instead of the test split.
    pub input: Option<PathBuf>,
}

impl Overrides {
    fn flags(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        if let Some(s) = self.steps {
            m.insert("steps".into(), json!(s));
        }
        if self.no_lre {
            m.insert("no_lre".into(), json!(true));
        }
        if let Some(t) = self.threshold {
            m.insert("threshold".into(), json!(t));
        }
        if let Some(p) = &self.prompt_override {
            m.insert("prompt_override".into(), json!(p));
        }
        if let Some(p) = &self.checkpoints {
            m.insert("checkpoints".into(), json!(p.display().to_string()));
        }
        if let Some(p) = &self.input {
            m.insert("input".into(), json!(p.display().to_string()));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// `ok`, or the error that stopped the command.
    pub status: String,
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub flags: BTreeMap<String, Value>,
    pub wall_time_s: f64,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: Command,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Human-readable lines for standard output.
    pub summary: Vec<String>,
}

/// Per-image record written next to every `infer` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub id: String,
    pub input: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub hard_prompt: Vec<String>,
    pub hard_text: String,
    /// Sigmoid class probabilities from the extractor.
    pub tag_scores: Vec<f64>,
    pub soft_prompt: Embeddings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_override: Option<String>,
    /// Sampler settings for this image, with the seed of its batch.
    pub sampler: SamplerConfig,
    pub use_lre: bool,
}

/// Fixed locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, kind: ComponentKind) -> PathBuf {
        self.checkpoints().join(checkpoint_file(kind))
    }

    pub fn report(&self, stage: &str) -> PathBuf {
        self.root.join("reports").join(format!("{stage}.json"))
    }

    pub fn infer(&self) -> PathBuf {
        self.root.join("infer")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn manifest(&self, cmd: Command) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", cmd.name()))
    }

    pub fn log(&self, cmd: Command) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", cmd.name()))
    }

    /// Path relative to the run directory when inside it.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

fn checkpoint_file(kind: ComponentKind) -> &'static str {
    match kind {
        ComponentKind::Teacher => "teacher.ckpt",
        ComponentKind::Dape => "dape.ckpt",
        ComponentKind::Vae => "vae.ckpt",
        ComponentKind::BaseUnet => "base.ckpt",
        ComponentKind::SrControl => "sr.ckpt",
    }
}

fn producer(kind: ComponentKind) -> Command {
    match kind {
        ComponentKind::Teacher => Command::TrainTeacher,
        ComponentKind::Dape => Command::TrainDape,
        ComponentKind::Vae => Command::TrainVae,
        ComponentKind::BaseUnet => Command::TrainBase,
        ComponentKind::SrControl => Command::TrainSr,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Removes a directory owned by one command so that stale files never outlive
/// the manifest that listed them.
fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Line-delimited JSON log. Write failures are kept and reported when the
/// command finishes rather than interrupting training.
struct JsonLog {
    path: PathBuf,
    out: BufWriter<std::fs::File>,
    failed: Option<std::io::Error>,
}

impl JsonLog {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(f),
            failed: None,
        })
    }

    fn line(&mut self, v: Value) {
        if self.failed.is_none() {
            if let Err(e) = writeln!(self.out, "{v}") {
                self.failed = Some(e);
            }
        }
    }

    fn step(&mut self, stage: &str, step: usize, loss: f64) {
        self.line(json!({"event": "step", "stage": stage, "step": step, "loss": loss}));
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Bookkeeping for one command run.
struct Ctx {
    layout: Layout,
    config_hash: String,
    log: JsonLog,
    inputs: BTreeMap<PathBuf, String>,
    outputs: Vec<PathBuf>,
    summary: Vec<String>,
}

impl Ctx {
    fn input(&mut self, path: &Path) -> Result<()> {
        if !self.inputs.contains_key(path) {
            let d = sha256_file(path)?;
            self.inputs.insert(path.to_path_buf(), d);
        }
        Ok(())
    }

    fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    fn json_output<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        write_json(&path, value)?;
        self.output(path);
        Ok(())
    }

    fn dataset(&mut self) -> Result<Dataset> {
        let ds = Dataset::open(self.layout.dataset())?;
        self.input(&ds.root.join(crate::dataset::MANIFEST_FILE))?;
        Ok(ds)
    }

    fn checkpoint(&mut self, dir: &Path, kind: ComponentKind) -> Result<Checkpoint> {
        let path = dir.join(checkpoint_file(kind));
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                hint: format!("run `{}` first", producer(kind)),
            });
        }
        self.input(&path)?;
        let ck = Checkpoint::load_kind(&path, kind)?;
        if !ck.config_hash.is_empty() && ck.config_hash != self.config_hash {
            let msg = format!("{kind} checkpoint was trained under config {}, current config is {}", ck.config_hash, self.config_hash);
            self.log.line(json!({"event": "warning", "message": msg}));
            self.summary.push(format!("warning: {msg}"));
        }
        Ok(ck)
    }

    fn save_checkpoint(&mut self, mut ck: Checkpoint) -> Result<()> {
        ck.config_hash = self.config_hash.clone();
        let path = self.layout.checkpoint(ck.kind);
        ck.save(&path)?;
        self.output(path);
        Ok(())
    }

    /// Fails if a file this command read was modified while it ran.
    fn verify_inputs(&self) -> Result<()> {
        for (path, before) in &self.inputs {
            if path.exists() && &sha256_file(path)? != before {
                bail!(State, "{} changed while the command was running", path.display());
            }
        }
        Ok(())
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
    config_hash: String,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let config_hash = cfg.hash()?;
        Ok(Self {
            layout: Layout::new(cfg.out_dir.clone()),
            cfg,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.cfg.seed, stage)
    }

    pub fn run(&self, cmd: Command, ov: &Overrides) -> Result<Outcome> {
        let start = Instant::now();
        std::fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        let log_path = self.layout.log(cmd);
        let mut ctx = Ctx {
            layout: self.layout.clone(),
            config_hash: self.config_hash.clone(),
            log: JsonLog::create(log_path.clone())?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            summary: Vec::new(),
        };
        ctx.log.line(json!({
            "event": "start",
            "command": cmd.name(),
            "version": VERSION,
            "config_hash": self.config_hash,
            "seed": self.cfg.seed,
            "flags": ov.flags(),
        }));
        let result = self.dispatch(cmd, ov, &mut ctx).and_then(|_| ctx.verify_inputs());
        let wall = start.elapsed().as_secs_f64();
        let status = match &result {
            Ok(()) => "ok".to_string(),
            Err(e) => e.to_string(),
        };
        ctx.log.line(json!({"event": "end", "status": status, "wall_time_s": wall}));
        let Ctx {
            log,
            inputs,
            mut outputs,
            summary,
            ..
        } = ctx;
        log.finish()?;
        outputs.push(log_path);
        let mut seen = BTreeSet::new();
        outputs.retain(|p| seen.insert(p.clone()));
        let manifest = Manifest {
            command: cmd.name().to_string(),
            version: VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.cfg.seed,
            status,
            inputs: inputs
                .into_iter()
                .map(|(p, sha256)| FileDigest {
                    path: self.layout.relative(&p),
                    sha256,
                })
                .collect(),
            outputs: outputs.iter().map(|p| self.layout.relative(p)).collect(),
            flags: ov.flags(),
            wall_time_s: wall,
        };
        let manifest_path = self.layout.manifest(cmd);
        write_json(&manifest_path, &manifest)?;
        result?;
        Ok(Outcome {
            command: cmd,
            manifest,
            manifest_path,
            summary,
        })
    }

    fn dispatch(&self, cmd: Command, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        match cmd {
            Command::MakeDataset => self.make_dataset(ctx),
            Command::TrainTeacher => self.train_teacher(ov, ctx),
            Command::TrainVae => self.train_vae(ov, ctx),
            Command::TrainBase => self.train_base(ov, ctx),
            Command::TrainDape => self.train_dape(ov, ctx),
            Command::TrainSr => self.train_sr(ov, ctx),
            Command::Infer => self.infer(ov, ctx),
            Command::Evaluate => self.evaluate(ctx),
            Command::Ablate => self.ablate(ov, ctx),
        }
    }

    fn make_dataset(&self, ctx: &mut Ctx) -> Result<()> {
        let root = self.layout.dataset();
        reset_dir(&root)?;
        if let Some(dir) = &self.cfg.data.source_dir {
            ctx.log.line(json!({"event": "ingest", "source_dir": dir.display().to_string()}));
        }
        let (ds, written) = make_dataset(&self.cfg, &root, self.cfg.execution)?;
        ctx.outputs.extend(written);
        let counts: Vec<String> = SplitName::ALL
            .iter()
            .map(|s| format!("{} {}", ds.entries(*s).len(), s.as_str()))
            .collect();
        ctx.summary.push(format!(
            "dataset: {} images ({}), {}x{} HR, {}x{} LR, {} tags",
            ds.manifest.splits.values().map(Vec::len).sum::<usize>(),
            counts.join(", "),
            ds.manifest.hr_size,
            ds.manifest.hr_size,
            ds.manifest.lr_size,
            ds.manifest.lr_size,
            ds.vocabulary().len()
        ));
        Ok(())
    }

    fn train_teacher(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let ds = ctx.dataset()?;
        let exec = self.cfg.execution;
        let train = ds.load(SplitName::Train, exec)?;
        let held = ds.load(SplitName::Heldout, exec)?;
        let mut tcfg = self.cfg.teacher.train.clone();
        tcfg.iterations = ov.steps.unwrap_or(tcfg.iterations);
        let log = &mut ctx.log;
        let (teacher, report) = train_teacher(
            &self.cfg.teacher.arch,
            ds.vocabulary(),
            &train.hr,
            &train.tags,
            &held.hr,
            &held.tags,
            &tcfg,
            self.seed("teacher"),
            |s, l| log.step("teacher", s, l),
        )?;
        ctx.save_checkpoint(teacher.to_checkpoint(tcfg.iterations as u64)?)?;
        ctx.json_output(self.layout.report("teacher"), &report)?;
        ctx.summary.push(format!(
            "teacher: held-out HR Jaccard {:.3} -> {:.3}, exact match {:.3}",
            report.initial.mean_jaccard, report.final_eval.mean_jaccard, report.final_eval.exact_match
        ));
        Ok(())
    }

    fn train_vae(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let ds = ctx.dataset()?;
        let exec = self.cfg.execution;
        let train = ds.load(SplitName::Train, exec)?;
        let held = ds.load(SplitName::Heldout, exec)?;
        let mut vcfg = self.cfg.vae.train.clone();
        vcfg.iterations = ov.steps.unwrap_or(vcfg.iterations);
        let log = &mut ctx.log;
        let (vae, report) = train_vae(&self.cfg.vae.arch, &train.hr, &held.hr, &vcfg, self.seed("vae"), |s, l| {
            log.step("vae", s, l)
        })?;
        ctx.save_checkpoint(vae.to_checkpoint(vcfg.iterations as u64)?)?;
        ctx.json_output(self.layout.report("vae"), &report)?;
        ctx.summary.push(format!(
            "vae: held-out reconstruction PSNR {:.2} -> {:.2} dB, latent scale {:.4}",
            report.initial_psnr, report.final_psnr, report.latent_scale
        ));
        Ok(())
    }

    fn train_base(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let ds = ctx.dataset()?;
        let vae = Vae::from_checkpoint(&ctx.checkpoint(&self.layout.checkpoints(), ComponentKind::Vae)?, DType::F32)?;
        let exec = self.cfg.execution;
        let train = ds.load(SplitName::Train, exec)?;
        let held = ds.load(SplitName::Heldout, exec)?;
        let train_z = vae.encode_all(&train.hr)?;
        let held_z = vae.encode_all(&held.hr)?;
        let schedule = self.cfg.diffusion.schedule.build()?;
        let mut bcfg = self.cfg.diffusion.base.clone();
        bcfg.iterations = ov.steps.unwrap_or(bcfg.iterations);
        let log = &mut ctx.log;
        let (base, report) = train_base(
            &self.cfg.diffusion.unet,
            &self.cfg.diffusion.text,
            ds.vocabulary(),
            LatentSet {
                latents: &train_z,
                tags: &train.tags,
            },
            LatentSet {
                latents: &held_z,
                tags: &held.tags,
            },
            &schedule,
            &bcfg,
            self.seed("base"),
            |s, l| log.step("base", s, l),
        )?;
        ctx.save_checkpoint(base.to_checkpoint(bcfg.iterations as u64)?)?;
        ctx.json_output(self.layout.report("base"), &report)?;
        ctx.summary.push(format!(
            "base: held-out noise MSE {:.4} -> {:.4}",
            report.initial_heldout, report.final_heldout
        ));
        Ok(())
    }

    fn train_dape(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let ds = ctx.dataset()?;
        let teacher_ck = ctx.checkpoint(&self.layout.checkpoints(), ComponentKind::Teacher)?;
        let exec = self.cfg.execution;
        let train = ds.load(SplitName::Train, exec)?;
        let held = ds.load(SplitName::Heldout, exec)?.take(self.cfg.dape.heldout.max(1));
        let mut dcfg = self.cfg.dape.clone();
        dcfg.iterations = ov.steps.unwrap_or(dcfg.iterations);
        let log = &mut ctx.log;
        let (dape, report) = train_dape(
            &teacher_ck,
            &train.hr,
            HeldOut {
                hr: &held.hr,
                lr: &held.lr,
                tags: &held.tags,
            },
            &self.cfg.degradation,
            &dcfg,
            self.seed("dape"),
            exec,
            |s, v| {
                log.line(json!({"event": "step", "stage": "dape", "step": s, "loss": v.total, "rep": v.rep_term, "logits": v.logits_term}))
            },
        )?;
        if report.teacher_checksum_before != report.teacher_checksum_after {
            bail!(State, "teacher weights changed during extractor training");
        }
        ctx.save_checkpoint(dape.to_checkpoint(dcfg.iterations as u64)?)?;
        ctx.json_output(self.layout.report("dape"), &report)?;
        let (r0, r1) = (report.initial.loss.rep_term, report.final_eval.loss.rep_term);
        ctx.summary.push(format!(
            "dape: held-out representation MSE {r0:.4} -> {r1:.4} ({:.0}% lower)",
            100.0 * (1.0 - r1 / r0.max(1e-30))
        ));
        ctx.summary.push(format!(
            "dape: LR tag Jaccard {:.3} (extractor) vs {:.3} (frozen tagger)",
            report.final_eval.student_jaccard, report.final_eval.teacher_lr_jaccard
        ));
        Ok(())
    }

    fn train_sr(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let ds = ctx.dataset()?;
        let dir = self.layout.checkpoints();
        let base_ck = ctx.checkpoint(&dir, ComponentKind::BaseUnet)?;
        let vae = Vae::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Vae)?, DType::F32)?;
        let dape = Dape::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Dape)?, DType::F32)?;
        let exec = self.cfg.execution;
        let train = ds.load(SplitName::Train, exec)?;
        let held = ds.load(SplitName::Heldout, exec)?;
        let train_z = vae.encode_all(&train.hr)?;
        let held_z = vae.encode_all(&held.hr)?;
        let schedule = self.cfg.diffusion.schedule.build()?;
        let mut scfg = self.cfg.diffusion.sr.clone();
        scfg.iterations = ov.steps.unwrap_or(scfg.iterations);
        let log = &mut ctx.log;
        let (model, report) = train_sr(
            SrInputs {
                base: &base_ck,
                vae: &vae,
                dape: &dape,
                schedule: &schedule,
                degradation: &self.cfg.degradation,
            },
            &train.hr,
            &train_z,
            SrPairs {
                latents: &held_z,
                lr: &held.lr,
            },
            &scfg,
            self.seed("sr"),
            exec,
            |s, l| log.step("sr", s, l),
        )?;
        if report.checksums_before != report.checksums_after {
            bail!(State, "frozen weights changed during super-resolution training");
        }
        ctx.save_checkpoint(model.to_checkpoint(scfg.iterations as u64)?)?;
        ctx.json_output(self.layout.report("sr"), &report)?;
        let d = &report.diffusion;
        ctx.summary.push(format!(
            "sr: held-out noise MSE {:.4} -> {:.4} ({:.0}% lower), frozen weights unchanged",
            d.initial_heldout,
            d.final_heldout,
            100.0 * (1.0 - d.final_heldout / d.initial_heldout.max(1e-30))
        ));
        Ok(())
    }

    fn sampler(&self, ov: &Overrides) -> SamplerConfig {
        let mut s = self.cfg.sampler.sampler(self.cfg.seed);
        s.steps = ov.steps.unwrap_or(s.steps);
        if ov.no_lre {
            s.use_lre = false;
        }
        s
    }

    fn infer(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let dir = ov.checkpoints.clone().unwrap_or_else(|| self.layout.checkpoints());
        let base_ck = ctx.checkpoint(&dir, ComponentKind::BaseUnet)?;
        let sr_ck = ctx.checkpoint(&dir, ComponentKind::SrControl)?;
        let vae = Vae::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Vae)?, DType::F32)?;
        let dape = Dape::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Dape)?, DType::F32)?;
        let model = SrModel::from_checkpoints(&base_ck, &sr_ck, DType::F32)?;
        let vocab = dape.vocabulary().clone();

        // (id, LR path, LR image, reference path)
        let mut items: Vec<(String, PathBuf, ImageTensor, Option<PathBuf>)> = Vec::new();
        match &ov.input {
            Some(input) => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(input)
                    .map_err(|e| Error::io(input, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                files.sort();
                if files.is_empty() {
                    bail!(Argument, "{} contains no PNG images", input.display());
                }
                for f in files {
                    ctx.input(&f)?;
                    let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let img = ImageTensor::load_png(&f)?;
                    items.push((id, f, img, None));
                }
            }
            None => {
                let ds = ctx.dataset()?;
                let test = ds.load(SplitName::Test, self.cfg.execution)?;
                for ((e, lr), id) in ds.entries(SplitName::Test).iter().zip(test.lr).zip(test.ids) {
                    let lr_path = ds.root.join(e.lr.as_ref().expect("test entries store LR images"));
                    items.push((id, lr_path, lr, Some(ds.root.join(&e.hr))));
                }
            }
        }
        let lrs: Vec<ImageTensor> = items.iter().map(|i| i.2.clone()).collect();
        let threshold = ov.threshold.unwrap_or(self.cfg.eval.threshold);
        let mut bundles = Vec::with_capacity(lrs.len());
        for chunk in lrs.chunks(32) {
            let refs: Vec<&ImageTensor> = chunk.iter().collect();
            bundles.extend(dape.extract_batch(&refs, threshold)?);
        }
        if let Some(text) = &ov.prompt_override {
            let tags = TagSet::parse(text, &vocab)?;
            bundles = bundles.into_iter().map(|b| b.with_hard(tags.clone(), &vocab)).collect();
        }
        let schedule = self.cfg.diffusion.schedule.build()?;
        let scfg = self.sampler(ov);
        let batch = self.cfg.sampler.batch_size;
        let outputs = sample_batched(&model, &vae, &lrs, &bundles, self.cfg.degradation.final_scale, &schedule, &scfg, batch)?;

        let out_dir = self.layout.infer();
        reset_dir(&out_dir)?;
        for (k, ((item, bundle), out)) in items.iter().zip(&bundles).zip(&outputs).enumerate() {
            let (id, lr_path, _, reference) = item;
            let png = out_dir.join(format!("{id}.png"));
            out.save_png(&png)?;
            let record = InferRecord {
                id: id.clone(),
                input: self.layout.relative(lr_path),
                output: self.layout.relative(&png),
                reference: reference.as_ref().map(|r| self.layout.relative(r)),
                hard_prompt: bundle.hard_prompt.names(&vocab).iter().map(|s| s.to_string()).collect(),
                hard_text: bundle.hard_text.clone(),
                tag_scores: bundle.soft_prompt.logits.iter().map(|&l| sigmoid(l as f64)).collect(),
                soft_prompt: bundle.soft_prompt.clone(),
                prompt_override: ov.prompt_override.clone(),
                sampler: SamplerConfig {
                    seed: batch_seed(scfg.seed, k / batch),
                    ..scfg.clone()
                },
                use_lre: scfg.use_lre,
            };
            ctx.output(png);
            ctx.json_output(out_dir.join(format!("{id}.json")), &record)?;
        }
        ctx.summary.push(format!(
            "infer: {} images, {} steps, LRE {}, seed {}",
            outputs.len(),
            scfg.steps,
            if scfg.use_lre { "on" } else { "off" },
            scfg.seed
        ));
        Ok(())
    }

    /// Sidecar records of the last `infer` run, sorted by id.
    pub fn infer_records(&self) -> Result<Vec<InferRecord>> {
        let dir = self.layout.infer();
        let missing = || Error::MissingArtifact {
            artifact: dir.display().to_string(),
            hint: "run `infer` first".to_string(),
        };
        if !dir.is_dir() {
            return Err(missing());
        }
        let mut records = Vec::new();
        for e in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = e.map_err(|e| Error::io(&dir, e))?.path();
            if p.extension().is_some_and(|x| x == "json") {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                records.push(serde_json::from_str::<InferRecord>(&text)?);
            }
        }
        if records.is_empty() {
            return Err(missing());
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(records)
    }

    fn checkpoint_ids(&self, cmd: Command) -> BTreeMap<String, String> {
        Manifest::load(self.layout.manifest(cmd))
            .map(|m| {
                m.inputs
                    .into_iter()
                    .filter(|f| f.path.ends_with(".ckpt"))
                    .map(|f| (f.path, f.sha256))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn meta(&self, seeds: Vec<u64>, checkpoints: BTreeMap<String, String>, digest: String) -> RunMeta {
        RunMeta {
            config_hash: self.config_hash.clone(),
            seeds,
            checkpoints,
            ap_interpolation: AP_INTERPOLATION.to_string(),
            y_channel: self.cfg.eval.y_channel,
            inputs_digest: digest,
        }
    }

    fn evaluate(&self, ctx: &mut Ctx) -> Result<()> {
        let records = self.infer_records()?;
        let ds = ctx.dataset()?;
        let vocab = ds.vocabulary().clone();
        let mut ids = Vec::new();
        let (mut outputs, mut refs, mut lrs) = (Vec::new(), Vec::new(), Vec::new());
        let (mut preds, mut scores, mut truths) = (Vec::new(), Vec::new(), Vec::new());
        let mut seeds = BTreeSet::new();
        for r in &records {
            let Some(reference) = &r.reference else {
                bail!(State, "infer output {} has no reference image; evaluate needs the test split", r.id);
            };
            let Some((_, entry)) = ds.find(&r.id) else {
                bail!(State, "infer output {} is not in the dataset", r.id);
            };
            for p in [&r.output, reference, &r.input] {
                ctx.input(&self.layout.resolve(p))?;
            }
            outputs.push(ImageTensor::load_png(self.layout.resolve(&r.output))?);
            refs.push(ImageTensor::load_png(self.layout.resolve(reference))?);
            lrs.push(ImageTensor::load_png(self.layout.resolve(&r.input))?);
            preds.push(TagSet::from_names(&r.hard_prompt, &vocab)?);
            scores.push(r.tag_scores.clone());
            truths.push(TagSet::from_names(&entry.tags, &vocab)?);
            seeds.insert(r.sampler.seed);
            ids.push(r.id.clone());
        }
        let seeds: Vec<u64> = seeds.into_iter().collect();
        let meta = self.meta(seeds.clone(), self.checkpoint_ids(Command::Infer), inputs_digest(&lrs, &seeds));
        let exec = self.cfg.execution;
        let mut report = build_report(
            "infer",
            &ids,
            &outputs,
            &refs,
            Some(TaggingInputs {
                predictions: &preds,
                scores: &scores,
                truths: &truths,
                vocab: &vocab,
            }),
            &[],
            meta,
            exec,
        )?;
        let (w, pct) = (self.cfg.eval.flat_window, self.cfg.eval.flat_percentile);
        let devs = exec.try_map_range(outputs.len(), |i| {
            let up = bicubic(&lrs[i], refs[i].height(), refs[i].width())?.clamp01();
            masked_mean_abs_diff(&outputs[i], &up, &flat_mask(&refs[i], w, pct))
        })?;
        for (m, d) in report.images.iter_mut().zip(devs) {
            m.extra.insert(FLAT_DEVIATION.to_string(), d);
        }
        report.recompute_aggregates();
        ctx.json_output(self.layout.eval_report(), &report)?;
        ctx.summary.push(format!(
            "evaluate: {} images, PSNR-Y {:.2} dB, SSIM-Y {:.4}, OP {}, OR {}, AP {}",
            report.images.len(),
            report.psnr,
            report.ssim,
            fmt_opt(report.op),
            fmt_opt(report.or),
            fmt_opt(report.ap)
        ));
        for w in &report.warnings {
            ctx.summary.push(format!("warning: {w}"));
        }
        Ok(())
    }

    fn ablate(&self, ov: &Overrides, ctx: &mut Ctx) -> Result<()> {
        let dir = self.layout.checkpoints();
        let base_ck = ctx.checkpoint(&dir, ComponentKind::BaseUnet)?;
        let sr_ck = ctx.checkpoint(&dir, ComponentKind::SrControl)?;
        let vae = Vae::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Vae)?, DType::F32)?;
        let dape = Dape::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Dape)?, DType::F32)?;
        let teacher = TagTeacher::from_checkpoint(&ctx.checkpoint(&dir, ComponentKind::Teacher)?, DType::F32)?;
        let model = SrModel::from_checkpoints(&base_ck, &sr_ck, DType::F32)?;
        let ds = ctx.dataset()?;
        let exec = self.cfg.execution;
        let test = ds.load(SplitName::Test, exec)?.take(self.cfg.eval.benchmark_size);
        for e in &ds.entries(SplitName::Test)[..test.len()] {
            ctx.input(&ds.root.join(&e.hr))?;
            if let Some(lr) = &e.lr {
                ctx.input(&ds.root.join(lr))?;
            }
        }
        let schedule = self.cfg.diffusion.schedule.build()?;
        let checkpoints: BTreeMap<String, String> = ctx
            .inputs
            .iter()
            .filter(|(p, _)| p.extension().is_some_and(|x| x == "ckpt"))
            .map(|(p, d)| (self.layout.relative(p), d.clone()))
            .collect();
        let settings = AblationSettings {
            sampler: self.sampler(ov),
            batch_size: self.cfg.sampler.batch_size,
            threshold: ov.threshold.unwrap_or(self.cfg.eval.threshold),
            flat_window: self.cfg.eval.flat_window,
            flat_percentile: self.cfg.eval.flat_percentile,
            parallel_arms: self.cfg.eval.parallel_arms,
            meta: self.meta(Vec::new(), checkpoints, String::new()),
        };
        let results = run_ablation(
            &AblationModels {
                sr: &model,
                vae: &vae,
                dape: &dape,
                teacher: &teacher,
                schedule: &schedule,
            },
            &Benchmark {
                ids: &test.ids,
                lr: &test.lr,
                hr: &test.hr,
                truths: &test.tags,
                vocab: ds.vocabulary(),
            },
            &settings,
            exec,
        )?;
        let out = self.layout.ablation();
        reset_dir(&out)?;
        for r in &results {
            ctx.json_output(out.join(r.arm.name()).join("report.json"), &r.report)?;
        }
        let reports: Vec<&crate::metrics::MetricsReport> = results.iter().map(|r| &r.report).collect();
        let text = table_text(&reports);
        for (name, body) in [("table.csv", table_csv(&reports)), ("table.txt", text.clone())] {
            write_text(&out.join(name), &body)?;
            ctx.output(out.join(name));
        }
        ctx.summary.push(format!(
            "ablate: {} arms on {} test images, {} sampler steps",
            results.len(),
            test.len(),
            settings.sampler.steps
        ));
        ctx.summary.extend(text.lines().map(str::to_string));
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(Command::parse(c.name()), Some(c));
        }
        assert_eq!(Command::parse("train"), None);
    }

    #[test]
    fn missing_prerequisite_names_the_producing_command() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::minimal(1, dir.path());
        cfg.data.hr_size = 64;
        cfg.data.lr_size = 16;
        let p = Pipeline::new(cfg).unwrap();
        let err = p.run(Command::TrainTeacher, &Overrides::default()).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("make-dataset"), "{err}");
        let m = Manifest::load(p.layout.manifest(Command::TrainTeacher)).unwrap();
        assert_ne!(m.status, "ok");
        assert_eq!(m.outputs, vec!["logs/train-teacher.jsonl".to_string()]);
    }

    #[test]
    fn flags_record_only_what_was_given() {
        assert!(Overrides::default().flags().is_empty());
        let f = Overrides {
            no_lre: true,
            steps: Some(3),
            ..Default::default()
        }
        .flags();
        assert_eq!(f.len(), 2);
        assert_eq!(f["no_lre"], json!(true));
    }
}
