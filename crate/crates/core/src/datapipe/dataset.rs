//! Dataset root layout: `images/` (PNG or JPEG), `annotations/<stem>.json`
//! (one record per image) and `splits/<name>.json`.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use super::{PairSample, SamplePair, SplitFile};
use crate::condmap::{AnnotationRecord, ConditionalMap};
use crate::error::{Error, Result};
use crate::imaging::{batch_tensor, ColorImage};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Annotation records of a dataset root, one per image, in file-name order.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<AnnotationRecord>,
}

impl DatasetIndex {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let image_dir = root.join("images");
        let mut names = Vec::new();
        for entry in std::fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))? {
            let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .unwrap_or_default();
            if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                names.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
        }
        names.sort();
        let mut records = Vec::with_capacity(names.len());
        for name in names {
            let stem = Path::new(&name).file_stem().unwrap().to_string_lossy().into_owned();
            let path = root.join("annotations").join(format!("{stem}.json"));
            if !path.is_file() {
                return Err(Error::MissingAnnotation(format!("images/{name}")));
            }
            let record = AnnotationRecord::load(&path)?;
            let referenced = Path::new(&record.image).file_name().map(|f| f.to_string_lossy().into_owned());
            if referenced.as_deref() != Some(name.as_str()) {
                return Err(Error::InvalidAnnotation(format!(
                    "{} describes `{}`, expected images/{name}",
                    path.display(),
                    record.image
                )));
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { root, records })
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        let image = &self.records[i].image;
        if image.contains('/') {
            self.root.join(image)
        } else {
            self.root.join("images").join(image)
        }
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.root.join("splits").join(format!("{name}.json"))
    }

    pub fn load_split(&self, name: &str) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        SplitFile::load(self.split_path(name))?.resolve(&self.records)
    }
}

/// Working resolution and stroke width for decoding a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub height: usize,
    pub width: usize,
    /// Line width in pixels for boundary and skeleton maps.
    pub stroke: f64,
}

impl LoadOptions {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            stroke: (0.01 * height.max(width) as f64).ceil().max(2.0),
        }
    }
}

/// Images and conditional maps decoded at the working resolution, held in
/// memory for the lifetime of a run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    pub images: Vec<ColorImage>,
    pub maps: Vec<ConditionalMap>,
    pub options: LoadOptions,
}

impl Dataset {
    pub fn load(index: &DatasetIndex, options: LoadOptions) -> Result<Self> {
        let images = (0..index.records.len())
            .map(|i| ColorImage::open(index.image_path(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_memory(index.records.clone(), images, options)
    }

    /// `images` are at their original size; annotations refer to it.
    pub fn from_memory(records: Vec<AnnotationRecord>, images: Vec<ColorImage>, options: LoadOptions) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::ShapeMismatch(format!("{} records for {} images", records.len(), images.len())));
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (h, w) = (options.height, options.width);
        let mut maps = Vec::with_capacity(records.len());
        let mut resized = Vec::with_capacity(images.len());
        for (r, img) in records.iter().zip(images) {
            maps.push(r.shape.rasterize((img.height(), img.width()), h, w, options.stroke)?);
            resized.push(if (img.height(), img.width()) == (h, w) { img } else { img.resized(h, w) });
        }
        Ok(Self {
            records,
            images: resized,
            maps,
            options,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample(&self, pair: SamplePair) -> PairSample {
        let (s, t) = (&self.records[pair.source], &self.records[pair.target]);
        PairSample {
            source: self.images[pair.source].clone(),
            source_map: self.maps[pair.source].clone(),
            source_category: s.category,
            target: self.images[pair.target].clone(),
            target_map: self.maps[pair.target].clone(),
            target_category: t.category,
            subject: s.subject.clone(),
            scene: s.scene.clone(),
        }
    }

    /// Largest category index plus one.
    pub fn n_categories(&self) -> usize {
        self.records.iter().map(|r| r.category + 1).max().unwrap_or(0)
    }
}

/// A stacked minibatch of pair samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Tensor,
    pub source_map: Tensor,
    pub source_labels: Vec<usize>,
    pub target: Tensor,
    pub target_map: Tensor,
    pub target_labels: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[PairSample], device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let maps = |f: fn(&PairSample) -> &ConditionalMap| -> Result<Tensor> {
            let planes = samples.iter().map(|s| f(s).to_tensor(device)).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&planes, 0)?)
        };
        Ok(Self {
            source: batch_tensor(&samples.iter().map(|s| &s.source).collect::<Vec<_>>(), device)?,
            source_map: maps(|s| &s.source_map)?,
            source_labels: samples.iter().map(|s| s.source_category).collect(),
            target: batch_tensor(&samples.iter().map(|s| &s.target).collect::<Vec<_>>(), device)?,
            target_map: maps(|s| &s.target_map)?,
            target_labels: samples.iter().map(|s| s.target_category).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.source_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_labels.is_empty()
    }
}
