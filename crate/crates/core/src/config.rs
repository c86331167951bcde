//! Run configuration: one TOML document with a section per component.
//!
//! Only `seed` and `out_dir` are required. Every section falls back to the
//! component defaults, and unknown keys are rejected at any depth.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dape::DapeTrainConfig;
use crate::degradation::DegradationConfig;
use crate::diffusion::schedule::ScheduleConfig;
use crate::diffusion::text::TextConfig;
use crate::diffusion::train::{BaseTrainConfig, SrTrainConfig};
use crate::diffusion::unet::UNetArch;
use crate::diffusion::vae::{VaeArch, VaeTrainConfig};
use crate::error::{bail, Error, Result};
use crate::image::MIN_SIDE;
use crate::parallel::Execution;
use crate::sampler::{LreStart, SamplerConfig};
use crate::teacher::{TaggerArch, TeacherTrainConfig};
use crate::toydata::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub hr_size: usize,
    pub lr_size: usize,
    pub train_count: usize,
    pub heldout_count: usize,
    pub test_count: usize,
    /// Inclusive range of shapes per generated scene.
    pub shapes: [usize; 2],
    /// Shape radius range as a fraction of the image side.
    pub radius: [f32; 2],
    /// Directory of HR PNG images to ingest instead of generating scenes.
    /// An optional `tags.json` in it maps file names to tag lists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hr_size: 256,
            lr_size: 64,
            train_count: 1024,
            heldout_count: 64,
            test_count: 64,
            shapes: [1, 2],
            radius: [0.16, 0.3],
            source_dir: None,
        }
    }
}

impl DataConfig {
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            size: self.hr_size,
            min_shapes: self.shapes[0],
            max_shapes: self.shapes[1],
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub arch: TaggerArch,
    pub train: TeacherTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub arch: VaeArch,
    pub train: VaeTrainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub schedule: ScheduleConfig,
    pub unet: UNetArch,
    pub text: TextConfig,
    pub base: BaseTrainConfig,
    pub sr: SrTrainConfig,
}

/// Sampler settings; the sampling seed comes from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub use_lre: bool,
    pub guidance_scale: f64,
    pub lre_start: LreStart,
    /// Images denoised together.
    pub batch_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            steps: d.steps,
            use_lre: d.use_lre,
            guidance_scale: d.guidance_scale,
            lre_start: d.lre_start,
            batch_size: 16,
        }
    }
}

impl SamplerSection {
    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            use_lre: self.use_lre,
            seed,
            guidance_scale: self.guidance_scale,
            lre_start: self.lre_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub y_channel: bool,
    /// Hard-prompt decoding threshold at inference.
    pub threshold: f64,
    /// Neighbourhood side for the local-variance flat-region mask.
    pub flat_window: usize,
    /// Pixels below this percentile of local variance count as flat.
    pub flat_percentile: f64,
    /// Test images used by `ablate`; at most `data.test_count`.
    pub benchmark_size: usize,
    /// Run ablation arms concurrently.
    pub parallel_arms: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            y_channel: true,
            threshold: 0.5,
            flat_window: 5,
            flat_percentile: 25.0,
            benchmark_size: 64,
            parallel_arms: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub degradation: DegradationConfig,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub dape: DapeTrainConfig,
    #[serde(default)]
    pub vae: VaeSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn minimal(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            out_dir: out_dir.into(),
            execution: Execution::default(),
            data: DataConfig::default(),
            degradation: DegradationConfig::default(),
            teacher: TeacherSection::default(),
            dape: DapeTrainConfig::default(),
            vae: VaeSection::default(),
            diffusion: DiffusionSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical serialization,
    /// ignoring `out_dir` so that a moved run keeps its identity.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml_string()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            bail!(Config, "seed {} does not fit a signed 64-bit integer", self.seed);
        }
        if self.out_dir.as_os_str().is_empty() {
            bail!(Config, "out_dir is empty");
        }
        let d = &self.data;
        self.degradation.validate()?;
        if d.lr_size < MIN_SIDE {
            bail!(Config, "data.lr_size {} is below {MIN_SIDE}", d.lr_size);
        }
        if d.hr_size != d.lr_size * self.degradation.final_scale {
            bail!(
                Config,
                "data.hr_size {} must equal data.lr_size {} times degradation.final_scale {}",
                d.hr_size,
                d.lr_size,
                self.degradation.final_scale
            );
        }
        if d.train_count == 0 || d.heldout_count == 0 || d.test_count == 0 {
            bail!(Config, "data counts must all be positive");
        }
        d.scene().validate()?;
        if let Some(dir) = &d.source_dir {
            if !dir.is_dir() {
                bail!(Config, "data.source_dir {} is not a directory", dir.display());
            }
        }
        self.teacher.arch.validate()?;
        if self.teacher.train.batch_size == 0 || self.teacher.train.learning_rate <= 0.0 {
            bail!(Config, "teacher.train needs a positive batch size and learning rate");
        }
        self.dape.validate()?;
        self.vae.arch.validate()?;
        if d.hr_size % self.vae.arch.downscale != 0 {
            bail!(
                Config,
                "data.hr_size {} is not divisible by vae.arch.downscale {}",
                d.hr_size,
                self.vae.arch.downscale
            );
        }
        if self.vae.train.crop_size % self.vae.arch.downscale != 0 {
            bail!(Config, "vae.train.crop_size must be a multiple of vae.arch.downscale");
        }
        let schedule = self.diffusion.schedule.build().map_err(|e| Error::Config(format!("diffusion.schedule: {e}")))?;
        self.diffusion.unet.validate()?;
        if self.diffusion.unet.latent_channels != self.vae.arch.latent_channels {
            bail!(Config, "diffusion.unet.latent_channels must equal vae.arch.latent_channels");
        }
        if self.diffusion.text.dim == 0 || self.diffusion.text.context_len == 0 {
            bail!(Config, "diffusion.text needs a positive dim and context_len");
        }
        for (name, b) in [
            ("diffusion.base", self.diffusion.base.batch_size),
            ("diffusion.sr", self.diffusion.sr.batch_size),
            ("vae.train", self.vae.train.batch_size),
            ("sampler", self.sampler.batch_size),
        ] {
            if b == 0 {
                bail!(Config, "{name}.batch_size must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.diffusion.base.null_prompt_prob) {
            bail!(Config, "diffusion.base.null_prompt_prob must lie in [0, 1]");
        }
        if self.sampler.steps == 0 || self.sampler.steps > schedule.t_max() {
            bail!(Config, "sampler.steps {} outside [1, {}]", self.sampler.steps, schedule.t_max());
        }
        for (name, t) in [
            ("eval.threshold", self.eval.threshold),
            ("teacher.train.threshold", self.teacher.train.threshold),
            ("diffusion.sr.threshold", self.diffusion.sr.threshold),
        ] {
            if !(0.0..=1.0).contains(&t) {
                bail!(Config, "{name} must lie in [0, 1]");
            }
        }
        if self.eval.flat_window == 0 || !(0.0..=100.0).contains(&self.eval.flat_percentile) {
            bail!(Config, "eval.flat_window must be positive and eval.flat_percentile within [0, 100]");
        }
        if self.eval.benchmark_size == 0 {
            bail!(Config, "eval.benchmark_size must be positive");
        }
        Ok(())
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_toml_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\nout_dir = \"runs/x\"\n").unwrap();
        assert_eq!(cfg, RunConfig::minimal(3, "runs/x"));
        assert_eq!((cfg.data.hr_size, cfg.data.lr_size), (256, 64));
        assert_eq!(cfg.sampler.steps, 50);
        assert_eq!(cfg.dape.lambda, 1.0);
        assert_eq!(cfg.dape.lora_rank, 8);
    }

    #[test]
    fn missing_required_key_is_rejected() {
        assert!(matches!(RunConfig::from_toml_str("seed = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = RunConfig::from_toml_str("seed = 1\nout_dir = \"o\"\n[dape]\nlamda = 0.5\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lamda"), "{err}");
        let err = RunConfig::from_toml_str("seed = 1\nout_dir = \"o\"\n[diffusion.unet]\nwidth = [8, 16]\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut cfg = RunConfig::minimal(9, "out");
        cfg.data.hr_size = 64;
        cfg.data.lr_size = 16;
        cfg.dape.lambda = 0.37;
        cfg.degradation.stage1.blur_sigma.max = 2.718281828459045;
        cfg.sampler.lre_start = LreStart::TrainMax;
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_sizes_are_config_errors() {
        let mut cfg = RunConfig::minimal(0, "o");
        cfg.data.lr_size = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::minimal(0, "o");
        cfg.sampler.steps = 5000;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::minimal(0, "o");
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
