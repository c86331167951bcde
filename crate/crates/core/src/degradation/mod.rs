//! Synthetic LR/HR pair generation with a randomized two-stage degradation chain.
//!
//! Each stage applies blur, resize, noise and JPEG compression in that order.
//! The final downscale to `1/final_scale` of the HR size is a terminal bicubic
//! resize after both stages; the recipe log records this as `final_resize`.
//! Every random choice, including the noise realizations, is captured in the
//! [`DegradationRecipe`], so replaying a recipe on the same HR image
//! reproduces the LR image bit for bit.

mod jpeg;
mod kernel;
mod noise;
mod recipe;
mod resize;

pub use jpeg::jpeg_roundtrip;
pub use kernel::{convolve, gaussian_blur_kernel, Kernel2d};
pub use noise::{add_gaussian_noise, add_poisson_noise, apply_noise, NoiseKind};
pub use recipe::{
    sample_recipe, DegradationConfig, DegradationRecipe, Span, StageEntry, StageRanges, TERMINAL_RESIZE,
};
pub use resize::{axis_weights, bicubic, resize_by, resize_to, scaled_len, AxisWeights, ResizeMode};

use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::parallel::Execution;

pub fn apply_stage(image: &ImageTensor, stage: &StageEntry) -> Result<ImageTensor> {
    let blurred = convolve(image, &stage.blur_kernel);
    let mut out = resize_by(&blurred, stage.resize_factor, stage.resize_mode)?;
    apply_noise(out.data_mut(), stage.noise_kind, stage.noise_level, stage.noise_seed);
    let out = out.clamp01();
    match stage.jpeg_quality {
        Some(q) => Ok(jpeg_roundtrip(&out, q)?.clamp01()),
        None => Ok(out),
    }
}

/// Applies a recorded recipe. Bit-identical for equal inputs.
pub fn replay(hr: &ImageTensor, recipe: &DegradationRecipe) -> Result<ImageTensor> {
    let scale = recipe.final_scale;
    if scale == 0 || hr.height() % scale != 0 || hr.width() % scale != 0 {
        bail!(
            Argument,
            "HR size {}x{} is not divisible by the final scale {scale}",
            hr.height(),
            hr.width()
        );
    }
    let mut img = apply_stage(hr, &recipe.stage1)?;
    if let Some(st) = &recipe.stage2 {
        img = apply_stage(&img, st)?;
    }
    Ok(bicubic(&img, hr.height() / scale, hr.width() / scale)?.clamp01())
}

pub fn synthesize_pair(
    hr: &ImageTensor,
    config: &DegradationConfig,
    seed: u64,
) -> Result<(ImageTensor, DegradationRecipe)> {
    let scale = config.final_scale;
    if scale == 0 || hr.height() % scale != 0 || hr.width() % scale != 0 {
        bail!(
            Argument,
            "HR size {}x{} is not divisible by the final scale {scale}",
            hr.height(),
            hr.width()
        );
    }
    let recipe = sample_recipe(config, seed)?;
    let lr = replay(hr, &recipe)?;
    Ok((lr, recipe))
}

/// Degrades a set of HR images, one seed per image.
pub fn synthesize_batch(
    hrs: &[ImageTensor],
    config: &DegradationConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<(ImageTensor, DegradationRecipe)>> {
    if hrs.len() != seeds.len() {
        bail!(Argument, "{} images but {} seeds", hrs.len(), seeds.len());
    }
    exec.try_map_range(hrs.len(), |i| synthesize_pair(&hrs[i], config, seeds[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, salt: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            let v = ((y * 7 + x * 13 + c * 29 + salt * 31) % 97) as f32 / 96.0;
            0.25 + 0.5 * v
        })
        .unwrap()
    }

    #[test]
    fn output_geometry_follows_final_scale() {
        let hr = test_image(512, 512, 0);
        let (lr, _) = synthesize_pair(&hr, &DegradationConfig::default(), 1).unwrap();
        assert_eq!((lr.height(), lr.width()), (128, 128));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let hr = test_image(66, 64, 0);
        assert!(matches!(
            synthesize_pair(&hr, &DegradationConfig::default(), 0),
            Err(crate::error::Error::Argument(_))
        ));
    }

    #[test]
    fn replay_reproduces_the_pair() {
        let hr = test_image(64, 64, 3);
        let (lr, recipe) = synthesize_pair(&hr, &DegradationConfig::default(), 42).unwrap();
        assert_eq!(replay(&hr, &recipe).unwrap(), lr);
        let json = serde_json::to_string(&recipe).unwrap();
        let back: DegradationRecipe = serde_json::from_str(&json).unwrap();
        assert_eq!(replay(&hr, &back).unwrap(), lr);
    }

    #[test]
    fn every_stage_output_is_in_unit_range() {
        let cfg = DegradationConfig::default();
        for seed in 0..20 {
            let hr = test_image(64, 64, seed as usize);
            let r = sample_recipe(&cfg, seed).unwrap();
            let s1 = apply_stage(&hr, &r.stage1).unwrap();
            assert!(s1.is_in_unit_range());
            if let Some(st) = &r.stage2 {
                assert!(apply_stage(&s1, st).unwrap().is_in_unit_range());
            }
        }
    }

    #[test]
    fn constant_image_through_noiseless_stage_stays_constant() {
        let hr = ImageTensor::filled(40, 40, 3, 0.6).unwrap();
        for mode in ResizeMode::ALL {
            let st = StageEntry {
                resize_mode: mode,
                resize_factor: 0.7,
                ..StageEntry::identity()
            };
            let out = apply_stage(&hr, &st).unwrap();
            assert_eq!((out.height(), out.width()), (28, 28));
            assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-6));
        }
    }

    #[test]
    fn identity_stage_with_jpeg_is_close_to_input() {
        let hr = test_image(64, 64, 1);
        let st = StageEntry {
            jpeg_quality: Some(95),
            ..StageEntry::identity()
        };
        let out = apply_stage(&hr, &st).unwrap();
        assert!(out.mean_abs_diff(&hr).unwrap() <= 0.05);
    }

    #[test]
    fn blur_never_raises_the_maximum() {
        let hr = test_image(32, 32, 5);
        for sigma in [0.3, 1.0, 2.5] {
            let k = gaussian_blur_kernel(9, sigma).unwrap();
            assert!(convolve(&hr, &k).max_value() <= hr.max_value() + 1e-6);
        }
    }

    #[test]
    fn batch_matches_single_calls_under_both_executions() {
        let hrs: Vec<_> = (0..4).map(|i| test_image(64, 64, i)).collect();
        let seeds = [3, 1, 4, 1];
        let cfg = DegradationConfig::default();
        let seq = synthesize_batch(&hrs, &cfg, &seeds, Execution::Sequential).unwrap();
        let par = synthesize_batch(&hrs, &cfg, &seeds, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq[2], synthesize_pair(&hrs[2], &cfg, 4).unwrap());
    }
}
