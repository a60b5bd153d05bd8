//! Small convolutional gesture classifier used for F1, IS and FID features.

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{aggregate_psnr, fid, inception_score, mse_images, psnr_from_mse, weighted_f1, EvalReport, FidMode, PairScore};
use crate::error::{Error, Result};
use crate::imaging::{batch_tensor, ColorImage};
use crate::losses::category_ce;
use crate::nn::{leaky_relu, seeded_rng, Conv2d, ConvBackend, Init, ParamStore};

/// Maps images to fixed-length feature vectors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn features(&self, images: &[ColorImage]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Images are resized to `input_size` squared before the first layer.
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            widths: vec![16, 32, 64],
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            val_ratio: 0.1,
            test_ratio: 0.1,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("classifier widths must be non-empty and positive".into()));
        }
        if self.input_size >> self.widths.len() == 0 {
            return Err(Error::InvalidConfig(format!(
                "input size {} is too small for {} stride-2 layers",
                self.input_size,
                self.widths.len()
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("batch size and learning rate must be positive".into()));
        }
        let held = self.val_ratio + self.test_ratio;
        if !(0.0..1.0).contains(&self.val_ratio) || !(0.0..1.0).contains(&self.test_ratio) || held >= 1.0 {
            return Err(Error::InvalidConfig("validation and test ratios must leave training data".into()));
        }
        Ok(())
    }
}

/// Stride-2 3x3 convolutions, global average pooling, linear head.
pub struct GestureClassifier {
    config: ClassifierConfig,
    n_c: usize,
    convs: Vec<Conv2d>,
    head_w: Tensor,
    head_b: Tensor,
    params: ParamStore,
    device: Device,
}

impl GestureClassifier {
    pub fn new(config: ClassifierConfig, n_c: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        if n_c < 2 {
            return Err(Error::DegenerateLabels);
        }
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(config.seed);
        let mut init = Init::new(&mut params, &mut rng, device);
        let mut root = init.pp("classifier");
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut root.pp(format!("conv.{i}")), c_in, w, 3, 2, 1, ConvBackend::Im2col)?);
            c_in = w;
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let mut head = root.pp("head");
        let head_w = head.uniform("weight", &[c_in, n_c], bound)?;
        let head_b = head.uniform("bias", &[n_c], bound)?;
        Ok(Self {
            config,
            n_c,
            convs,
            head_w,
            head_b,
            params,
            device: device.clone(),
        })
    }

    pub fn n_categories(&self) -> usize {
        self.n_c
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn input(&self, images: &[ColorImage]) -> Result<Tensor> {
        let s = self.config.input_size;
        let resized: Vec<ColorImage> = images
            .iter()
            .map(|img| if (img.height(), img.width()) == (s, s) { img.clone() } else { img.resized(s, s) })
            .collect();
        batch_tensor(&resized.iter().collect::<Vec<_>>(), &self.device)
    }

    fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, 0.1)?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.pooled(x)?.matmul(&self.head_w)?.broadcast_add(&self.head_b)?)
    }

    pub fn probabilities(&self, images: &[ColorImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.logits(&self.input(chunk)?)?.to_dtype(candle_core::DType::F64)?;
            let p = candle_nn::ops::softmax(&logits, D::Minus1)?;
            out.extend(p.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[ColorImage]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect())
    }

    pub fn f1(&self, images: &[ColorImage], labels: &[usize]) -> Result<f64> {
        weighted_f1(&self.predict(images)?, labels)
    }
}

impl FeatureExtractor for GestureClassifier {
    fn name(&self) -> &str {
        "small-conv"
    }

    fn features(&self, images: &[ColorImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let f = self.pooled(&self.input(chunk)?)?.to_dtype(candle_core::DType::F64)?;
            out.extend(f.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub validation_f1: Option<f64>,
    pub test_f1: Option<f64>,
}

/// Trains a classifier on a seeded 80/10/10 split of `images`.
pub fn train_gesture_classifier(
    images: &[ColorImage],
    labels: &[usize],
    config: &ClassifierConfig,
    device: &Device,
) -> Result<(GestureClassifier, ClassifierReport)> {
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} images for {} labels", images.len(), labels.len())));
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateLabels);
    }
    let n_c = labels.iter().max().unwrap() + 1;
    let model = GestureClassifier::new(config.clone(), n_c, device)?;

    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (config.val_ratio * images.len() as f64).round() as usize;
    let n_test = (config.test_ratio * images.len() as f64).round() as usize;
    let (val_idx, rest) = order.split_at(n_val.min(order.len()));
    let (test_idx, train_idx) = rest.split_at(n_test.min(rest.len()));
    if train_idx.is_empty() {
        return Err(Error::InsufficientSamples(0));
    }
    let mut train_idx = train_idx.to_vec();

    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: config.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let s = config.input_size;
    let inputs: Vec<ColorImage> = images.iter().map(|img| img.resized(s, s)).collect();
    for _ in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<ColorImage> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = category_ce(&model.logits(&model.input(&batch)?)?, &y)?;
            opt.backward_step(&loss)?;
        }
    }

    let score = |idx: &[usize]| -> Result<Option<f64>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let imgs: Vec<ColorImage> = idx.iter().map(|&i| inputs[i].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        Ok(Some(model.f1(&imgs, &y)?))
    };
    let report = ClassifierReport {
        train: train_idx.len(),
        validation: val_idx.len(),
        test: test_idx.len(),
        validation_f1: score(val_idx)?,
        test_f1: score(test_idx)?,
    };
    Ok((model, report))
}

/// Scores generated images against their targets. IS is computed over the
/// generated images only.
pub fn evaluate_translations(
    classifier: &GestureClassifier,
    generated: &[ColorImage],
    targets: &[ColorImage],
    target_labels: &[usize],
    pair_ids: &[String],
    fid_mode: FidMode,
) -> Result<EvalReport> {
    if generated.len() != targets.len() || targets.len() != target_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} generated, {} targets, {} labels",
            generated.len(),
            targets.len(),
            target_labels.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_pair = Vec::with_capacity(generated.len());
    let mut mses = Vec::with_capacity(generated.len());
    let mut psnrs = Vec::with_capacity(generated.len());
    for (i, (g, t)) in generated.iter().zip(targets).enumerate() {
        let m = mse_images(g, t)?;
        let p = psnr_from_mse(m);
        mses.push(m);
        psnrs.push(p);
        if let Some(id) = pair_ids.get(i) {
            per_pair.push(PairScore { pair: id.clone(), mse: m, psnr: p });
        }
    }
    let psnr = aggregate_psnr(&psnrs);
    let norm = |imgs: &[ColorImage]| imgs.iter().map(|i| fid_mode.normalize(i)).collect::<Vec<_>>();
    let fid_value = fid(&classifier.features(&norm(targets))?, &classifier.features(&norm(generated))?)?;
    Ok(EvalReport {
        pairs: generated.len(),
        mse: mses.iter().sum::<f64>() / mses.len() as f64,
        psnr: psnr.mean,
        psnr_infinite: psnr.infinite_count,
        is_mean: inception_score(&classifier.probabilities(generated)?)?,
        fid: fid_value,
        fid_mode,
        f1: classifier.f1(generated, target_labels)?,
        per_pair,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize) -> (Vec<ColorImage>, Vec<usize>) {
        let mut rng = seeded_rng(5);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let mut img = ColorImage::filled(16, 16, [0.0; 3]);
            for v in img.data_mut() {
                *v = rand::Rng::random_range(&mut rng, -0.3..0.3f32) + if label == 0 { -0.5 } else { 0.5 };
            }
            images.push(img);
            labels.push(label);
        }
        (images, labels)
    }

    fn small() -> ClassifierConfig {
        ClassifierConfig {
            input_size: 16,
            widths: vec![8, 8],
            epochs: 10,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (images, labels) = blobs(60);
        let (model, report) = train_gesture_classifier(&images, &labels, &small(), &Device::Cpu).unwrap();
        assert_eq!((report.train, report.validation, report.test), (48, 6, 6));
        assert!(report.test_f1.unwrap() >= 0.95, "{report:?}");
        assert_eq!(model.f1(&images, &labels).unwrap(), model.f1(&images, &labels).unwrap());
    }

    #[test]
    fn single_class_is_degenerate() {
        let (images, _) = blobs(6);
        let labels = vec![1; 6];
        assert!(matches!(
            train_gesture_classifier(&images, &labels, &small(), &Device::Cpu),
            Err(Error::DegenerateLabels)
        ));
    }
}
