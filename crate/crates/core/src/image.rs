//! Pixel-space image container.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const MIN_SIDE: usize = 8;

/// BT.601 luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// An `H×W×C` image with interleaved channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            bail!(Argument, "image {height}x{width} is smaller than the {MIN_SIDE}px minimum");
        }
        if channels != 1 && channels != 3 {
            bail!(Argument, "images carry 1 or 3 channels, got {channels}");
        }
        if data.len() != height * width * channels {
            bail!(
                Argument,
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims()
    }

    /// Single-channel BT.601 luma. Grayscale images are returned as-is.
    pub fn luma(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            bail!(
                Argument,
                "shape mismatch {:?} vs {:?}",
                self.dims(),
                other.dims()
            );
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?;
        Ok(Self::from_dynamic(&img)?)
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, 3, data)
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(())
    }

    /// `(C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Stacks equally sized images into a `(B, C, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let Some(first) = images.first() else {
            bail!(Argument, "empty image batch");
        };
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_shape(first) {
                bail!(Argument, "images in a batch must share one shape");
            }
            data.extend_from_slice(&im.data);
        }
        let t = Tensor::from_vec(
            data,
            (images.len(), first.height, first.width, first.channels),
            device,
        )?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`ImageTensor::to_tensor`]; accepts `(C, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, c, data)
    }

    /// Splits a `(B, C, H, W)` tensor into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_images() {
        assert!(ImageTensor::filled(7, 16, 3, 0.0).is_err());
        assert!(ImageTensor::filled(8, 8, 2, 0.0).is_err());
    }

    #[test]
    fn tensor_roundtrip_keeps_layout() {
        let im = ImageTensor::from_fn(8, 10, 3, |y, x, c| (y * 100 + x * 10 + c) as f32 / 1000.0).unwrap();
        let t = im.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 8, 10]);
        let v: f32 = t.get(2).unwrap().get(3).unwrap().get(4).unwrap().to_scalar().unwrap();
        assert_eq!(v, im.get(3, 4, 2));
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), im);
    }

    #[test]
    fn luma_of_white_is_one() {
        let im = ImageTensor::filled(8, 8, 3, 1.0).unwrap();
        assert!(im.luma().data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn png_roundtrip_is_lossless_on_u8_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let im = ImageTensor::from_fn(9, 12, 3, |y, x, c| ((y * 7 + x * 3 + c * 11) % 256) as f32 / 255.0).unwrap();
        im.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p).unwrap();
        assert!(back.mean_abs_diff(&im).unwrap() < 1e-7);
    }
}
