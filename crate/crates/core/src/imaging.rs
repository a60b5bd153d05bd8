//! Planar color images in the generator's value range and their conversions
//! to and from 8-bit files and tensors.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};

/// A three-channel image stored channel-first with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for a 3x{height}x{width} image, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Mirror left to right.
    pub fn flip_x(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: flip_planes(&self.data, self.width),
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = to_u8(self.get(c, y as usize, x as usize));
            }
        }
        img
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        encode_png(&self.to_rgb8())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    /// Bilinear resize through the 8-bit representation.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let img = image::imageops::resize(
            &self.to_rgb8(),
            width as u32,
            height as u32,
            FilterType::Triangle,
        );
        Self::from_rgb8(&img)
    }

    /// Values as 8-bit intensities in [0, 255], without quantization.
    pub fn to_intensity(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) as f64) + 1.0) * 127.5)
            .collect()
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (3, self.height, self.width),
            device,
        )?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            _ => t.clone(),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {c}"
            )));
        }
        let data = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(h, w, data)
    }
}

/// PNG encoding of an 8-bit image buffer.
pub fn encode_png<P>(img: &image::ImageBuffer<P, Vec<u8>>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType<Subpixel = u8>,
{
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(img.as_raw(), img.width(), img.height(), P::COLOR_TYPE)?;
    Ok(out)
}

pub(crate) fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Mirrors every row of a stack of `width`-wide planes.
pub(crate) fn flip_planes<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(width) {
        out.extend(row.iter().rev());
    }
    out
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn batch_tensor(images: &[&ColorImage], device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_roundtrip_is_lossless() {
        let mut img = RgbImage::new(3, 2);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = image::Rgb([i as u8 * 40, 255 - i as u8 * 30, 7]);
        }
        let back = ColorImage::from_rgb8(&img).to_rgb8();
        assert_eq!(img, back);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ColorImage::new(2, 3, (0..18).map(|v| v as f32 / 18.0).collect()).unwrap();
        assert_ne!(img.flip_x(), img);
        assert_eq!(img.flip_x().flip_x(), img);
        assert_eq!(img.flip_x().get(1, 0, 0), img.get(1, 0, 2));
    }

    #[test]
    fn tensor_roundtrip() {
        let img = ColorImage::filled(4, 5, [0.5, -0.25, 1.0]);
        let t = img.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[3, 4, 5]);
        assert_eq!(ColorImage::from_tensor(&t).unwrap(), img);
    }
}
