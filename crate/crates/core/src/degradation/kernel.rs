use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::ImageTensor;

/// Square convolution kernel, row-major, odd side length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel2d {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel2d {
    pub fn delta(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Self { size, weights }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let n = self.size;
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                weights[j * n + i] = self.weights[i * n + j];
            }
        }
        Self { size: n, weights }
    }
}

/// Isotropic Gaussian kernel normalized to unit sum.
pub fn gaussian_blur_kernel(size: usize, sigma: f64) -> Result<Kernel2d> {
    if size < 3 || size % 2 == 0 {
        bail!(Argument, "blur kernel size must be odd and >= 3, got {size}");
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        bail!(Argument, "blur sigma must be positive and finite, got {sigma}");
    }
    let r = (size / 2) as f64;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            weights.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    // The centre tap is exp(0) = 1, so the sum never underflows to zero.
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(Kernel2d { size, weights })
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Correlates every channel with `kernel` under reflect padding.
pub fn convolve(image: &ImageTensor, kernel: &Kernel2d) -> ImageTensor {
    let (h, w, c) = image.dims();
    if kernel.size == 1 {
        let k = kernel.weights[0] as f32;
        let mut out = image.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        return out;
    }
    let r = (kernel.size / 2) as isize;
    let src = image.data();
    let mut out = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for ki in 0..kernel.size {
                let sy = reflect(y as isize + ki as isize - r, h);
                for kj in 0..kernel.size {
                    let wgt = kernel.at(ki, kj);
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = reflect(x as isize + kj as isize - r, w);
                    let base = (sy * w + sx) * c;
                    for ch in 0..c {
                        acc[ch] += wgt * src[base + ch] as f64;
                    }
                }
            }
            let base = (y * w + x) * c;
            for ch in 0..c {
                out[base + ch] = acc[ch] as f32;
            }
        }
    }
    ImageTensor::new(h, w, c, out).expect("same geometry as input")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sigma_collapses_to_delta() {
        let k = gaussian_blur_kernel(3, 1e-3).unwrap();
        assert_eq!(k, Kernel2d::delta(3));
    }

    #[test]
    fn matches_closed_form() {
        let k = gaussian_blur_kernel(5, 1.0).unwrap();
        let raw: Vec<f64> = (0..25)
            .map(|n| {
                let (i, j) = ((n / 5) as f64 - 2.0, (n % 5) as f64 - 2.0);
                (-(i * i + j * j) / 2.0).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        for (a, b) in k.weights.iter().zip(&raw) {
            assert!((a - b / s).abs() < 1e-12);
        }
        assert!((k.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_even_or_small_sizes() {
        assert!(gaussian_blur_kernel(4, 1.0).is_err());
        assert!(gaussian_blur_kernel(1, 1.0).is_err());
        assert!(gaussian_blur_kernel(5, 0.0).is_err());
    }

    #[test]
    fn reflect_stays_in_bounds() {
        assert_eq!(reflect(-1, 8), 1);
        assert_eq!(reflect(8, 8), 6);
        assert_eq!(reflect(-10, 8), 4);
        for i in -40..40 {
            assert!(reflect(i, 8) < 8);
        }
    }

    #[test]
    fn delta_convolution_is_identity() {
        let im = ImageTensor::from_fn(9, 11, 3, |y, x, c| ((y * 13 + x * 7 + c) % 10) as f32 / 10.0).unwrap();
        assert_eq!(convolve(&im, &Kernel2d::delta(5)), im);
    }
}
