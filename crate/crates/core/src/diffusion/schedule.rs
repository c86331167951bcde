//! Linear-β noise schedule, forward noising and spaced timestep subsets.
//!
//! Timesteps are 1-based: `ᾱ(t) = Π_{s=1..t} (1 − β_s)` with `ᾱ(0) = 1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Size of the spaced subset used by the sampler.
    pub spacing: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            spacing: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end, self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    spaced_steps: Vec<usize>,
}

/// Linear ramp of `t_max` betas plus `spacing` evenly strided steps that start at `t_max`.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64, spacing: usize) -> Result<NoiseSchedule> {
    if t_max == 0 {
        bail!(Argument, "schedule needs at least one timestep");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(Argument, "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]");
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alphas_cumprod = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_cumprod.push(acc);
    }
    let spaced_steps = spaced_subset(t_max, spacing)?;
    Ok(NoiseSchedule {
        betas,
        alphas_cumprod,
        spaced_steps,
    })
}

/// `round(T − k·T/count)` for `k = 0..count`: strictly decreasing, starts at `T`, ends at `≥ 1`.
pub fn spaced_subset(t_max: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > t_max {
        bail!(Argument, "spacing {count} must lie in [1, {t_max}]");
    }
    let stride = t_max as f64 / count as f64;
    Ok((0..count)
        .map(|k| (t_max as f64 - k as f64 * stride).round() as usize)
        .collect())
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ(t)`, with `ᾱ(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn spaced_steps(&self) -> &[usize] {
        &self.spaced_steps
    }

    /// Same betas, different sampler spacing.
    pub fn respaced(&self, count: usize) -> Result<Self> {
        Ok(Self {
            spaced_steps: spaced_subset(self.t_max(), count)?,
            ..self.clone()
        })
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            bail!(Argument, "timestep {t} outside [1, {}]", self.t_max());
        }
        Ok(())
    }

    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·eps` for a batch, one timestep per row.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: &[usize]) -> Result<Tensor> {
        for &ti in t {
            self.check_t(ti)?;
        }
        let ab: Vec<f64> = t.iter().map(|&ti| self.alpha_bar(ti)).collect();
        add_noise_at(z0, eps, &ab)
    }
}

/// Forward noising with explicit `ᾱ` values per batch row; `ᾱ` may be 0 or 1.
pub fn add_noise_at(z0: &Tensor, eps: &Tensor, alpha_bar: &[f64]) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        bail!(Argument, "latent shape {:?} differs from noise shape {:?}", z0.dims(), eps.dims());
    }
    let b = z0.dim(0)?;
    if alpha_bar.len() != b {
        bail!(Argument, "{} alpha values for a batch of {b}", alpha_bar.len());
    }
    if let Some(a) = alpha_bar.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        bail!(Argument, "alpha_bar {a} outside [0, 1]");
    }
    let mut bshape = vec![1usize; z0.rank()];
    bshape[0] = b;
    let dev = z0.device();
    let dt = z0.dtype();
    let sa: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let sn: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let sa = Tensor::from_vec(sa, bshape.as_slice(), dev)?.to_dtype(dt)?;
    let sn = Tensor::from_vec(sn, bshape.as_slice(), dev)?.to_dtype(dt)?;
    Ok((z0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn fifty_steps_out_of_a_thousand() {
        let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
        assert_eq!(s.spaced_steps().len(), 50);
        assert_eq!(s.spaced_steps()[0], 1000);
        assert!(s.spaced_steps().windows(2).all(|w| w[0] > w[1]));
        assert!(*s.spaced_steps().last().unwrap() >= 1);
        assert!(s.alpha_bar(1000) < 1e-4);
    }

    #[test]
    fn full_schedule_is_every_step() {
        assert_eq!(make_schedule(4, 0.1, 0.2, 4).unwrap().spaced_steps(), &[4, 3, 2, 1]);
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 0..s.t_max() {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn bad_bounds_are_rejected() {
        assert!(make_schedule(10, 0.0, 0.1, 5).is_err());
        assert!(make_schedule(10, 0.2, 0.1, 5).is_err());
        assert!(make_schedule(10, 0.1, 1.0, 5).is_err());
        assert!(make_schedule(10, 0.1, 0.2, 11).is_err());
        let s = make_schedule(10, 0.1, 0.2, 5).unwrap();
        let z = Tensor::zeros((1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(s.add_noise(&z, &z, &[0]).is_err());
        assert!(s.add_noise(&z, &z, &[11]).is_err());
    }

    #[test]
    fn endpoints_are_exact() {
        let z0 = Tensor::new(&[[0.3f32, -1.7, 2.5]], &Device::Cpu).unwrap();
        let e = Tensor::new(&[[1.1f32, 0.2, -0.4]], &Device::Cpu).unwrap();
        let a = add_noise_at(&z0, &e, &[1.0]).unwrap().to_vec2::<f32>().unwrap();
        let b = add_noise_at(&z0, &e, &[0.0]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, z0.to_vec2::<f32>().unwrap());
        assert_eq!(b, e.to_vec2::<f32>().unwrap());
    }
}
