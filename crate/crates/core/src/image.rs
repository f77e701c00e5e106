//! The image type shared by every module: H×W×3, row-major, channels last,
//! values in [0, 1].

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// Lossless mapping from an 8-bit channel to the [0, 1] range. Everything that
/// produces images from bytes goes through here so PNG round trips are exact.
#[inline]
pub fn unit_from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

#[inline]
pub fn u8_from_unit(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!("{}", height * width * 3), data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite_unit(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// SHA-256 over the dimensions and raw little-endian sample bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn mse(&self, other: &Image) -> f32 {
        let n = self.data.len().max(1) as f32;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f32>() / n
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| u8_from_unit(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size matches dims")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| unit_from_u8(v)).collect();
        Self { height: img.height() as usize, width: img.width() as usize, data }
    }

    pub fn quantized(&self) -> Image {
        Image::from_rgb8(&self.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::file(path, e))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    /// Loads any raster format and resamples to `size`×`size`.
    pub fn load_resized(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
        if img.width() as usize == size && img.height() as usize == size {
            return Ok(Self::from_rgb8(&img));
        }
        let resized = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
        Ok(Self::from_rgb8(&resized))
    }

    /// Nearest-neighbour upscale, for figures.
    pub fn upscaled(&self, factor: usize) -> Image {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for r in 0..h {
            for c in 0..w {
                out.set_pixel(r, c, self.pixel(r / factor, c / factor));
            }
        }
        out
    }

    /// Stacks images into an (N, 3, H, W) tensor.
    pub fn batch_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Invalid("empty image batch".into()))?;
        let (h, w) = first.dims();
        let mut buf = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.dims() != (h, w) {
                return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", img.height, img.width)));
            }
            buf.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(buf, (images.len(), h, w, 3), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::batch_tensor`]. Values are clamped into [0, 1].
    pub fn from_batch_tensor(t: &Tensor) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::shape("3 channels", c));
        }
        let data: Vec<f32> = t
            .to_dtype(DType::F32)?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .flatten_all()?
            .to_vec1()?;
        Ok(data
            .chunks(h * w * 3)
            .take(n)
            .map(|chunk| Image {
                height: h,
                width: w,
                data: chunk.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            })
            .collect())
    }
}

/// Lays images out left to right with a one-pixel gutter.
pub fn contact_sheet(images: &[&Image], gutter: [f32; 3]) -> Option<Image> {
    let first = images.first()?;
    let (h, w) = first.dims();
    let width = images.len() * w + images.len().saturating_sub(1);
    let mut sheet = Image::filled(h, width, gutter);
    for (k, img) in images.iter().enumerate() {
        let x0 = k * (w + 1);
        for r in 0..h.min(img.height()) {
            for c in 0..w.min(img.width()) {
                sheet.set_pixel(r, x0 + c, img.pixel(r, c));
            }
        }
    }
    Some(sheet)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
