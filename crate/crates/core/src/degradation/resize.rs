//! Separable antialiased resampling.
//!
//! Filters are stretched by the downscale ratio so that shrinking integrates
//! over the footprint of each output pixel. Windows that leave the image are
//! clipped and renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::{ImageTensor, MIN_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bicubic,
    Bilinear,
    Area,
}

impl ResizeMode {
    pub const ALL: [ResizeMode; 3] = [ResizeMode::Bicubic, ResizeMode::Bilinear, ResizeMode::Area];

    fn support(self) -> f64 {
        match self {
            ResizeMode::Bicubic => 2.0,
            ResizeMode::Bilinear => 1.0,
            ResizeMode::Area => 0.5,
        }
    }

    pub fn filter(self, x: f64) -> f64 {
        match self {
            ResizeMode::Bicubic => cubic(x),
            ResizeMode::Bilinear => {
                let x = x.abs();
                if x < 1.0 {
                    1.0 - x
                } else {
                    0.0
                }
            }
            ResizeMode::Area => {
                if (-0.5..0.5).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Keys cubic with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample window start and normalized weights.
#[derive(Debug, Clone)]
pub struct AxisWeights {
    pub taps: Vec<(usize, Vec<f64>)>,
}

pub fn axis_weights(mode: ResizeMode, in_len: usize, out_len: usize) -> AxisWeights {
    let scale = in_len as f64 / out_len as f64;
    let filter_scale = scale.max(1.0);
    let support = mode.support() * filter_scale;
    let taps = (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(in_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|i| mode.filter((i as f64 - center + 0.5) / filter_scale))
                .collect();
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                // The window fell between filter lobes; take the nearest sample.
                let nearest = (center.floor() as usize).min(in_len - 1);
                return (nearest, vec![1.0]);
            }
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w)
        })
        .collect();
    AxisWeights { taps }
}

/// Output side length for a relative resize.
pub fn scaled_len(len: usize, factor: f64) -> usize {
    (len as f64 * factor).round().max(1.0) as usize
}

pub fn resize_to(image: &ImageTensor, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<ImageTensor> {
    if out_h < MIN_SIDE || out_w < MIN_SIDE {
        bail!(
            Degradation,
            "resize to {out_h}x{out_w} falls below the {MIN_SIDE}px minimum"
        );
    }
    let (h, w, c) = image.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    // Horizontal pass into an h x out_w buffer.
    let wx = axis_weights(mode, w, out_w);
    let mut tmp = vec![0f64; h * out_w * c];
    for y in 0..h {
        for (ox, (lo, ws)) in wx.taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in ws.iter().enumerate() {
                    acc += wt * src[(y * w + lo + k) * c + ch] as f64;
                }
                tmp[(y * out_w + ox) * c + ch] = acc;
            }
        }
    }
    let wy = axis_weights(mode, h, out_h);
    let mut out = vec![0f32; out_h * out_w * c];
    for (oy, (lo, ws)) in wy.taps.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wt) in ws.iter().enumerate() {
                    acc += wt * tmp[((lo + k) * out_w + ox) * c + ch];
                }
                out[(oy * out_w + ox) * c + ch] = acc as f32;
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, out)
}

pub fn resize_by(image: &ImageTensor, factor: f64, mode: ResizeMode) -> Result<ImageTensor> {
    if !(factor > 0.0) || !factor.is_finite() {
        bail!(Argument, "resize factor must be positive, got {factor}");
    }
    resize_to(
        image,
        scaled_len(image.height(), factor),
        scaled_len(image.width(), factor),
        mode,
    )
}

/// Bicubic resize, the default for up/downsampling outside the degradation chain.
pub fn bicubic(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    resize_to(image, out_h, out_w, ResizeMode::Bicubic)
}
