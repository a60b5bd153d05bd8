//! Single-image translation with a loaded checkpoint.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, GrayImage, Luma};

use crate::checkpoint::Checkpoint;
use crate::condmap::{condition_batch, CategoryLabel, ShapeAnnotation};
use crate::datapipe::LoadOptions;
use crate::error::Result;
use crate::generator::Generator;
use crate::imaging::ColorImage;

pub struct Translation {
    /// Composite at the source image's size.
    pub image: ColorImage,
    /// Attention mask at the source image's size; white keeps the source.
    pub mask: GrayImage,
}

/// A read-only generator plus the metadata needed to condition it.
pub struct Translator {
    generator: Generator,
    categories: Vec<String>,
    checkpoint_id: String,
    options: LoadOptions,
    device: Device,
}

impl Translator {
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let generator = ck.build_generator(device)?;
        let cfg = generator.config();
        let n_c = cfg.n_c;
        let options = LoadOptions::new(cfg.height, cfg.width);
        let mut categories = ck.header.categories.clone();
        categories.truncate(n_c);
        for i in categories.len()..n_c {
            categories.push(format!("category_{i}"));
        }
        Ok(Self {
            checkpoint_id: ck.fingerprint()?,
            generator,
            categories,
            options,
            device: device.clone(),
        })
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, device)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    /// Working resolution `(height, width)` of the generator.
    pub fn resolution(&self) -> (usize, usize) {
        (self.options.height, self.options.width)
    }

    /// Resizes `source` to the working resolution, rasterizes `shape` (drawn
    /// on `source`) there, generates, and resizes the results back.
    pub fn translate(&self, source: &ColorImage, shape: &ShapeAnnotation, category: usize, rolling: bool) -> Result<Translation> {
        let label = CategoryLabel::new(category, self.n_categories())?;
        let (h, w) = self.resolution();
        let (sh, sw) = (source.height(), source.width());
        let map = shape.rasterize((sh, sw), h, w, self.options.stroke)?;
        let input = source.resized(h, w).to_tensor(&self.device)?.unsqueeze(0)?;
        let cond = condition_batch(&map.to_tensor(&self.device)?.unsqueeze(0)?, &[label.index()], label.n_c(), None)?;
        let rolled = self.generator.generate_rolled(&input, &cond, rolling)?;
        let out = rolled.last();
        let image = ColorImage::from_tensor(&out.composite)?.resized(sh, sw);
        let mask = mask_image(&out.attention, sh, sw)?;
        Ok(Translation { image, mask })
    }
}

fn mask_image(attention: &Tensor, height: usize, width: usize) -> Result<GrayImage> {
    let (_, _, h, w) = attention.dims4()?;
    let values = attention.flatten_all()?.to_vec1::<f32>()?;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    if (h, w) == (height, width) {
        return Ok(img);
    }
    Ok(image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{CheckpointHeader, FORMAT_VERSION};
    use crate::condmap::TriangleJson;
    use crate::generator::GeneratorConfig;
    use crate::Error;

    fn translator() -> Translator {
        let dev = Device::Cpu;
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            generator: GeneratorConfig::new(16, 16, 3).slimmed(16),
            discriminator: None,
            epoch: 0,
            categories: vec!["fist".into()],
        };
        let g = Generator::new(header.generator.clone(), 4, &dev).unwrap();
        Translator::from_checkpoint(&Checkpoint::capture(header, &g, None).unwrap(), &dev).unwrap()
    }

    fn triangle() -> ShapeAnnotation {
        ShapeAnnotation::Triangle(TriangleJson {
            vertices: [[5.0, 5.0], [30.0, 8.0], [12.0, 20.0]],
            base: 0,
        })
    }

    #[test]
    fn output_matches_source_size_and_is_deterministic() {
        let t = translator();
        assert_eq!(t.categories(), ["fist", "category_1", "category_2"]);
        let src = ColorImage::filled(24, 40, [0.2, -0.4, 0.6]);
        let a = t.translate(&src, &triangle(), 2, true).unwrap();
        let b = t.translate(&src, &triangle(), 2, true).unwrap();
        assert_eq!((a.image.height(), a.image.width()), (24, 40));
        assert_eq!(a.mask.dimensions(), (40, 24));
        assert_eq!(a.image.to_png_bytes().unwrap(), b.image.to_png_bytes().unwrap());
        assert!(matches!(t.translate(&src, &triangle(), 3, true), Err(Error::InvalidCategory { .. })));
    }
}
