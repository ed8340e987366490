//! RGB images in `[-1, 1]` and their PNG encoding.

use std::io::Cursor;

use image::{imageops::FilterType, DynamicImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Row-major `height × width × 3` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn put(&mut self, i: usize, j: usize, rgb: [f32; 3]) {
        let o = (i * self.width + j) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Channel-first copy (`3 × H × W`).
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let n = height * width;
        if chw.len() != 3 * n {
            return Err(CoreError::ShapeMismatch(format!(
                "expected {} values for a 3×{height}×{width} image, got {}",
                3 * n,
                chw.len()
            )));
        }
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * n + p];
            }
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    fn to_rgb8(&self) -> RgbImage {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    fn from_rgb8(img: &RgbImage) -> Self {
        Image {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 127.5 - 1.0).collect(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Loads any supported image file, center-crops it to a square and
    /// resizes to `size × size`.
    pub fn load_center_cropped(path: &std::path::Path, size: usize) -> Result<Self> {
        let img = image::open(path)?;
        Ok(Image::from_rgb8(&center_crop_resize(&img, size)))
    }
}

fn center_crop_resize(img: &DynamicImage, size: usize) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    cropped
        .resize_exact(size as u32, size as u32, FilterType::Triangle)
        .to_rgb8()
}
