use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};

use crate::error::Result;
use crate::image::ImageTensor;

/// Encodes at `quality` with a baseline JPEG codec and decodes again.
pub fn jpeg_roundtrip(image: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let (h, w, c) = image.dims();
    let mut buf = Vec::new();
    let color = if c == 3 {
        ExtendedColorType::Rgb8
    } else {
        ExtendedColorType::L8
    };
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode(
        &image.to_u8(),
        w as u32,
        h as u32,
        color,
    )?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)?;
    let data: Vec<f32> = if c == 3 {
        decoded.to_rgb8().as_raw().iter().map(|&v| v as f32 / 255.0).collect()
    } else {
        decoded.to_luma8().as_raw().iter().map(|&v| v as f32 / 255.0).collect()
    };
    ImageTensor::new(h, w, c, data)
}
