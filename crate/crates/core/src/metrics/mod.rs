//! Image-quality and category-consistency metrics.

mod classifier;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ColorImage;

pub use classifier::{
    evaluate_translations, train_gesture_classifier, ClassifierConfig, ClassifierReport, FeatureExtractor,
    GestureClassifier,
};

/// Peak intensity for 8-bit images.
pub const MAX_INTENSITY: f64 = 255.0;

/// Mean squared difference of two equally sized intensity buffers.
pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `20 log10(255 / sqrt(mse))`; `+inf` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (MAX_INTENSITY / mse.sqrt()).log10()
    }
}

pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

fn same_size(a: &ColorImage, b: &ColorImage) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// MSE on the 8-bit intensity scale.
pub fn mse_images(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    same_size(a, b)?;
    mse(&a.to_intensity(), &b.to_intensity())
}

pub fn psnr_images(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    Ok(psnr_from_mse(mse_images(a, b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrSummary {
    /// Mean over finite values (0 when there are none).
    pub mean: f64,
    pub finite_count: usize,
    /// Pairs reproduced exactly.
    pub infinite_count: usize,
}

pub fn aggregate_psnr(values: &[f64]) -> PsnrSummary {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = if finite.is_empty() { 0.0 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    PsnrSummary {
        mean,
        finite_count: finite.len(),
        infinite_count: values.len() - finite.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidMode {
    /// Images in [0, 1] mapped to [-1, 1] with `2x - 1`.
    Correct,
    /// The per-channel ImageNet affine that squeezed inputs into a narrow
    /// range, kept for comparison with older published numbers.
    Legacy,
}

impl std::str::FromStr for FidMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(FidMode::Correct),
            "legacy" => Ok(FidMode::Legacy),
            other => Err(Error::InvalidConfig(format!("unknown FID mode `{other}`"))),
        }
    }
}

const LEGACY_STD: [f32; 3] = [0.229, 0.224, 0.225];
const LEGACY_MEAN: [f32; 3] = [0.485, 0.456, 0.406];

impl FidMode {
    /// Network input for an image whose channels lie in [-1, 1].
    pub fn normalize(self, img: &ColorImage) -> ColorImage {
        let mut out = img.clone();
        let plane = img.height() * img.width();
        for c in 0..3 {
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                let unit = (*v + 1.0) / 2.0;
                *v = match self {
                    FidMode::Correct => 2.0 * unit - 1.0,
                    FidMode::Legacy => unit * (LEGACY_STD[c] / 0.5) + (LEGACY_MEAN[c] - 0.5) / 0.5,
                };
            }
        }
        out
    }
}

/// Sample mean and covariance (denominator `n - 1`) of row vectors.
pub fn gaussian_stats(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if feats.len() < 2 {
        return Err(Error::InsufficientSamples(feats.len()));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    let n = feats.len();
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

const EIGEN_FLOOR: f64 = 1e-10;

/// Symmetric PSD square root through eigendecomposition, clipping small
/// negative eigenvalues to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if !v.is_finite() {
            return Err(Error::NumericalFailure("non-finite eigenvalue in matrix square root".into()));
        }
        if *v < -1e-6 * scale {
            return Err(Error::NumericalFailure(format!("matrix is not positive semi-definite (eigenvalue {v})")));
        }
        *v = if *v < EIGEN_FLOOR { 0.0 } else { v.sqrt() };
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((Sx Sy)^(1/2))` evaluated as `Tr((Sx^(1/2) Sy Sx^(1/2))^(1/2))`,
/// which has the same eigenvalues and stays symmetric.
fn trace_sqrt_product(sx: &DMatrix<f64>, sy: &DMatrix<f64>) -> Result<f64> {
    let a = psd_sqrt(sx)?;
    let inner = &a * sy * &a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let mut t = 0.0;
    for v in eig.eigenvalues.iter() {
        if !v.is_finite() {
            return Err(Error::NumericalFailure("non-finite eigenvalue in covariance product".into()));
        }
        if *v > EIGEN_FLOOR {
            t += v.sqrt();
        }
    }
    Ok(t)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(feats_x: &[Vec<f64>], feats_y: &[Vec<f64>]) -> Result<f64> {
    let (mx, sx) = gaussian_stats(feats_x)?;
    let (my, sy) = gaussian_stats(feats_y)?;
    if mx.len() != my.len() {
        return Err(Error::ShapeMismatch(format!("feature dims {} vs {}", mx.len(), my.len())));
    }
    fid_from_stats(&mx, &sx, &my, &sy)
}

pub fn fid_from_stats(mx: &DVector<f64>, sx: &DMatrix<f64>, my: &DVector<f64>, sy: &DMatrix<f64>) -> Result<f64> {
    let diff = (mx - my).norm_squared();
    let value = diff + sx.trace() + sy.trace() - 2.0 * trace_sqrt_product(sx, sy)?;
    if !value.is_finite() {
        return Err(Error::NumericalFailure("FID is not finite".into()));
    }
    // Rounding can leave a tiny negative value for identical sets.
    Ok(value.max(0.0))
}

/// `exp(mean KL(p(y|x) || p(y)))` over rows of class probabilities.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = probs[0].len();
    for row in probs {
        let s: f64 = row.iter().sum();
        if row.len() != k || (s - 1.0).abs() > 1e-4 || row.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
            return Err(Error::InvalidDistribution(format!("row sums to {s}")));
        }
    }
    let n = probs.len() as f64;
    let marginal: Vec<f64> = (0..k).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mean_kl = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    Ok(mean_kl.exp())
}

/// Per-class F1 averaged with weights equal to each class's share of the
/// true labels.
pub fn weighted_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = pred.iter().chain(truth).max().unwrap() + 1;
    let (mut tp, mut fp, mut support) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &t) in pred.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let n = truth.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        if support[c] == 0 {
            continue;
        }
        let predicted = tp[c] + fp[c];
        let precision = if predicted == 0 { 0.0 } else { tp[c] as f64 / predicted as f64 };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += f1 * support[c] as f64 / n;
    }
    Ok(total)
}

/// Aggregate scores for a set of translated test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub mse: f64,
    pub psnr: f64,
    /// Pairs with zero error, excluded from the PSNR mean.
    pub psnr_infinite: usize,
    pub is_mean: f64,
    pub fid: f64,
    pub fid_mode: FidMode,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_pair: Vec<PairScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair: String,
    pub mse: f64,
    pub psnr: f64,
}

impl EvalReport {
    /// Plain-text table with the usual column set.
    pub fn table(&self) -> String {
        let fid_label = match self.fid_mode {
            FidMode::Correct => "FID",
            FidMode::Legacy => "FID*",
        };
        format!(
            "{:>8} {:>10} {:>6} {:>10} {:>8}\n{:>8.2} {:>10.2} {:>6.3} {:>10.2} {:>8.3}\n",
            "PSNR", fid_label, "F1", "MSE", "IS", self.psnr, self.fid, self.f1, self.mse, self.is_mean
        )
    }
}
