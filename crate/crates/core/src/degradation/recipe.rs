use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{gaussian_blur_kernel, Kernel2d};
use super::noise::NoiseKind;
use super::resize::ResizeMode;
use crate::error::{bail, Result};

/// Closed interval `[min, max]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub const fn point(v: f64) -> Self {
        Self { min: v, max: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        // Always consume one draw so degenerate spans keep the stream aligned.
        let u: f64 = rng.random();
        if self.min == self.max {
            self.min
        } else {
            self.min + u * (self.max - self.min)
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !self.min.is_finite() || !self.max.is_finite() {
            bail!(Config, "{what}: bounds must be finite");
        }
        if self.min > self.max {
            bail!(Config, "{what}: min {} exceeds max {}", self.min, self.max);
        }
        Ok(())
    }
}

impl From<[f64; 2]> for Span {
    fn from(v: [f64; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.min, s.max]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRanges {
    pub blur_sigma: Span,
    pub resize_factor: Span,
    /// Probability of gaussian (vs poisson) noise.
    pub gaussian_noise_prob: f64,
    pub gaussian_sigma: Span,
    pub poisson_scale: Span,
    pub jpeg_quality: [u8; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub kernel_sizes: Vec<usize>,
    pub resize_modes: Vec<ResizeMode>,
    pub stage1: StageRanges,
    pub stage2: StageRanges,
    pub second_stage_skip_prob: f64,
    pub jpeg: bool,
    pub final_scale: usize,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: (7..=21).step_by(2).collect(),
            resize_modes: ResizeMode::ALL.to_vec(),
            stage1: StageRanges {
                blur_sigma: Span::new(0.2, 3.0),
                resize_factor: Span::new(0.5, 1.5),
                gaussian_noise_prob: 0.5,
                gaussian_sigma: Span::new(0.0, 0.1),
                poisson_scale: Span::new(50.0, 500.0),
                jpeg_quality: [30, 95],
            },
            stage2: StageRanges {
                blur_sigma: Span::new(0.2, 1.5),
                resize_factor: Span::new(0.3, 1.2),
                gaussian_noise_prob: 0.5,
                gaussian_sigma: Span::new(0.0, 0.1),
                poisson_scale: Span::new(50.0, 500.0),
                jpeg_quality: [30, 95],
            },
            second_stage_skip_prob: 0.2,
            jpeg: true,
            final_scale: 4,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            bail!(Config, "degradation.kernel_sizes is empty");
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k < 3 || k % 2 == 0) {
            bail!(Config, "degradation.kernel_sizes: {k} is not an odd size >= 3");
        }
        if self.resize_modes.is_empty() {
            bail!(Config, "degradation.resize_modes is empty");
        }
        for (name, st) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            st.blur_sigma.validate(&format!("{name}.blur_sigma"))?;
            if st.blur_sigma.min <= 0.0 {
                bail!(Config, "{name}.blur_sigma must be positive");
            }
            st.resize_factor.validate(&format!("{name}.resize_factor"))?;
            if st.resize_factor.min <= 0.0 {
                bail!(Config, "{name}.resize_factor must be positive");
            }
            st.gaussian_sigma.validate(&format!("{name}.gaussian_sigma"))?;
            if st.gaussian_sigma.min < 0.0 {
                bail!(Config, "{name}.gaussian_sigma must be non-negative");
            }
            st.poisson_scale.validate(&format!("{name}.poisson_scale"))?;
            if st.poisson_scale.min <= 0.0 {
                bail!(Config, "{name}.poisson_scale must be positive");
            }
            if !(0.0..=1.0).contains(&st.gaussian_noise_prob) {
                bail!(Config, "{name}.gaussian_noise_prob must lie in [0, 1]");
            }
            let [qlo, qhi] = st.jpeg_quality;
            if qlo > qhi || qlo == 0 || qhi > 100 {
                bail!(Config, "{name}.jpeg_quality [{qlo}, {qhi}] is not a range within [1, 100]");
            }
        }
        if !(0.0..=1.0).contains(&self.second_stage_skip_prob) {
            bail!(Config, "degradation.second_stage_skip_prob must lie in [0, 1]");
        }
        if self.final_scale == 0 {
            bail!(Config, "degradation.final_scale must be >= 1");
        }
        Ok(())
    }
}

/// One fully resolved stage: blur, resize, noise, then JPEG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub blur_sigma: f64,
    pub blur_kernel: Kernel2d,
    pub resize_mode: ResizeMode,
    pub resize_factor: f64,
    pub noise_kind: NoiseKind,
    /// Gaussian sigma, or the Poisson scale.
    pub noise_level: f64,
    pub noise_seed: u64,
    /// `None` when JPEG is disabled.
    pub jpeg_quality: Option<u8>,
}

impl StageEntry {
    /// Delta kernel, no resize, no noise, no JPEG.
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            blur_kernel: Kernel2d::delta(1),
            resize_mode: ResizeMode::Bicubic,
            resize_factor: 1.0,
            noise_kind: NoiseKind::Gaussian,
            noise_level: 0.0,
            noise_seed: 0,
            jpeg_quality: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub stage1: StageEntry,
    /// `None` when the second stage was skipped.
    pub stage2: Option<StageEntry>,
    pub final_scale: usize,
    /// Where the final downscale happens; always a terminal bicubic resize here.
    pub final_resize: String,
    pub rng_seed: u64,
}

pub const TERMINAL_RESIZE: &str = "terminal-bicubic";

impl DegradationRecipe {
    pub fn identity(final_scale: usize) -> Self {
        Self {
            stage1: StageEntry::identity(),
            stage2: None,
            final_scale,
            final_resize: TERMINAL_RESIZE.to_string(),
            rng_seed: 0,
        }
    }
}

fn sample_stage<R: Rng>(cfg: &DegradationConfig, ranges: &StageRanges, jpeg: bool, rng: &mut R) -> Result<StageEntry> {
    let size = cfg.kernel_sizes[rng.random_range(0..cfg.kernel_sizes.len())];
    let blur_sigma = ranges.blur_sigma.sample(rng);
    let blur_kernel = gaussian_blur_kernel(size, blur_sigma)?;
    let resize_mode = cfg.resize_modes[rng.random_range(0..cfg.resize_modes.len())];
    let resize_factor = ranges.resize_factor.sample(rng);
    let gaussian = rng.random::<f64>() < ranges.gaussian_noise_prob;
    let (noise_kind, noise_level) = if gaussian {
        (NoiseKind::Gaussian, ranges.gaussian_sigma.sample(rng))
    } else {
        (NoiseKind::Poisson, ranges.poisson_scale.sample(rng))
    };
    let noise_seed: u64 = rng.random();
    let [qlo, qhi] = ranges.jpeg_quality;
    let q = rng.random_range(qlo..=qhi);
    Ok(StageEntry {
        blur_sigma,
        blur_kernel,
        resize_mode,
        resize_factor,
        noise_kind,
        noise_level,
        noise_seed,
        jpeg_quality: jpeg.then_some(q),
    })
}

/// Draws a complete two-stage recipe. Pure in `(config, seed)`.
pub fn sample_recipe(config: &DegradationConfig, seed: u64) -> Result<DegradationRecipe> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stage1 = sample_stage(config, &config.stage1, config.jpeg, &mut rng)?;
    let skip = rng.random::<f64>() < config.second_stage_skip_prob;
    let stage2 = sample_stage(config, &config.stage2, config.jpeg, &mut rng)?;
    Ok(DegradationRecipe {
        stage1,
        stage2: (!skip).then_some(stage2),
        final_scale: config.final_scale,
        final_resize: TERMINAL_RESIZE.to_string(),
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_config() -> DegradationConfig {
        let st = StageRanges {
            blur_sigma: Span::point(1.0),
            resize_factor: Span::point(0.75),
            gaussian_noise_prob: 1.0,
            gaussian_sigma: Span::point(0.02),
            poisson_scale: Span::point(100.0),
            jpeg_quality: [80, 80],
        };
        DegradationConfig {
            kernel_sizes: vec![7],
            resize_modes: vec![ResizeMode::Area],
            stage1: st.clone(),
            stage2: st,
            second_stage_skip_prob: 0.0,
            jpeg: true,
            final_scale: 4,
        }
    }

    #[test]
    fn degenerate_ranges_give_the_point_recipe() {
        let cfg = point_config();
        for seed in [0, 1, 99] {
            let r = sample_recipe(&cfg, seed).unwrap();
            for st in [&r.stage1, r.stage2.as_ref().unwrap()] {
                assert_eq!(st.blur_sigma, 1.0);
                assert_eq!(st.blur_kernel, gaussian_blur_kernel(7, 1.0).unwrap());
                assert_eq!(st.resize_mode, ResizeMode::Area);
                assert_eq!(st.resize_factor, 0.75);
                assert_eq!(st.noise_kind, NoiseKind::Gaussian);
                assert_eq!(st.noise_level, 0.02);
                assert_eq!(st.jpeg_quality, Some(80));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = DegradationConfig::default();
        assert_eq!(sample_recipe(&cfg, 5).unwrap(), sample_recipe(&cfg, 5).unwrap());
        assert_ne!(sample_recipe(&cfg, 5).unwrap(), sample_recipe(&cfg, 6).unwrap());
    }

    #[test]
    fn inverted_range_is_config_error() {
        let mut cfg = DegradationConfig::default();
        cfg.stage1.blur_sigma = Span::new(3.0, 0.2);
        assert!(matches!(sample_recipe(&cfg, 0), Err(crate::error::Error::Config(_))));
        let mut cfg = DegradationConfig::default();
        cfg.stage2.jpeg_quality = [90, 40];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sigma_draws_are_uniform_over_the_range() {
        // Uniform on [a, b]: mean (a+b)/2, sd (b-a)/sqrt(12).
        let span = Span::new(0.2, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| span.sample(&mut rng)).collect();
        assert!(draws.iter().all(|&v| span.contains(v)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (2.8 / 12f64.sqrt()) / (n as f64).sqrt();
        assert!((mean - 1.6).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn recipe_sigmas_stay_in_range() {
        let cfg = DegradationConfig::default();
        let mut seen_skip = false;
        for seed in 0..10_000u64 {
            let r = sample_recipe(&cfg, seed).unwrap();
            assert!(cfg.stage1.blur_sigma.contains(r.stage1.blur_sigma));
            assert!(cfg.stage1.resize_factor.contains(r.stage1.resize_factor));
            assert!((r.stage1.blur_kernel.sum() - 1.0).abs() < 1e-6);
            match &r.stage2 {
                Some(s) => {
                    assert!(cfg.stage2.blur_sigma.contains(s.blur_sigma));
                    assert!(cfg.stage2.resize_factor.contains(s.resize_factor));
                    let q = s.jpeg_quality.unwrap();
                    assert!((30..=95).contains(&q));
                }
                None => seen_skip = true,
            }
        }
        assert!(seen_skip);
    }
}
