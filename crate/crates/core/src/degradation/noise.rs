use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Poisson,
}

/// Adds `N(0, sigma²)` independently to every value. Does not clamp.
pub fn add_gaussian_noise<R: Rng>(values: &mut [f32], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in values {
        let n: f64 = rng.sample(StandardNormal);
        *v += (sigma * n) as f32;
    }
}

/// Shot noise: `x -> Poisson(x * scale) / scale`. Does not clamp.
pub fn add_poisson_noise<R: Rng>(values: &mut [f32], scale: f64, rng: &mut R) {
    if !(scale > 0.0) {
        return;
    }
    for v in values {
        let lambda = (*v as f64).max(0.0) * scale;
        if lambda > 0.0 {
            let k: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
            *v = (k / scale) as f32;
        } else {
            *v = 0.0;
        }
    }
}

pub fn apply_noise(values: &mut [f32], kind: NoiseKind, level: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NoiseKind::Gaussian => add_gaussian_noise(values, level, &mut rng),
        NoiseKind::Poisson => add_poisson_noise(values, level, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_std_matches_sigma() {
        let mut v = vec![0f32; 256 * 256];
        apply_noise(&mut v, NoiseKind::Gaussian, 0.1, 7);
        let n = v.len() as f64;
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.1).abs() / 0.1 < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn poisson_preserves_mean() {
        let mut v = vec![0.4f32; 100_000];
        apply_noise(&mut v, NoiseKind::Poisson, 50.0, 3);
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        // Var of the mean = x / (scale * n)
        let se = (0.4f64 / (50.0 * 100_000.0)).sqrt();
        assert!((mean - 0.4).abs() < 4.0 * se);
    }

    #[test]
    fn same_seed_same_noise() {
        let mut a = vec![0.5f32; 64];
        let mut b = vec![0.5f32; 64];
        apply_noise(&mut a, NoiseKind::Gaussian, 0.05, 11);
        apply_noise(&mut b, NoiseKind::Gaussian, 0.05, 11);
        assert_eq!(a, b);
    }
}
