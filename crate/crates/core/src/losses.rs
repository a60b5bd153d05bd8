//! Adversarial, reconstruction, classification and smoothness losses.
//!
//! Every loss upcasts its inputs to `f64` and returns an `f64` scalar tensor,
//! so reported values carry no single-precision accumulation error while
//! gradients still flow back to the `f32` networks.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

fn f64s(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `-mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake)))` on the
/// discriminator side; `-mean(log sigmoid(fake))` on the generator side.
pub fn gan_loss(prob_real: &Tensor, prob_fake: &Tensor, side: Side) -> Result<Tensor> {
    let fake = f64s(prob_fake)?;
    match side {
        Side::Discriminator => {
            let real = f64s(prob_real)?;
            let on_real = softplus(&real.neg()?)?.mean_all()?;
            let on_fake = softplus(&fake)?.mean_all()?;
            Ok((on_real + on_fake)?)
        }
        Side::Generator => Ok(softplus(&fake.neg()?)?.mean_all()?),
    }
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_reconstruction(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(x, y)?;
    Ok((f64s(x)? - f64s(y)?)?.abs()?.mean_all()?)
}

/// Batch mean of `-log softmax(logits)[label]`; `logits` is `(B, n_c)`.
pub fn category_ce(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, n_c) = logits
        .dims2()
        .map_err(|_| Error::ShapeMismatch(format!("logits must be (B, n_c), got {:?}", logits.dims())))?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut one_hot = vec![0f64; b * n_c];
    for (i, &label) in labels.iter().enumerate() {
        if label >= n_c {
            return Err(Error::InvalidCategory { index: label, n_c });
        }
        one_hot[i * n_c + label] = 1.0;
    }
    let one_hot = Tensor::from_vec(one_hot, (b, n_c), logits.device())?;
    let log_p = candle_nn::ops::log_softmax(&f64s(logits)?, D::Minus1)?;
    Ok((log_p * one_hot)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

/// Sum of squared vertical and horizontal forward differences over
/// `i < H-1, j < W-1` and all channels, averaged over the batch.
pub fn tv_regularizer(image: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = image
        .dims4()
        .map_err(|_| Error::InvalidShape(format!("expected (B, C, H, W), got {:?}", image.dims())))?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidShape(format!("total variation needs at least 2x2, got {h}x{w}")));
    }
    let x = f64s(image)?;
    let anchor = x.narrow(2, 0, h - 1)?.narrow(3, 0, w - 1)?;
    let down = x.narrow(2, 1, h - 1)?.narrow(3, 0, w - 1)?;
    let right = x.narrow(2, 0, h - 1)?.narrow(3, 1, w - 1)?;
    let dv = (down - &anchor)?.sqr()?.sum_all()?;
    let dh = (right - &anchor)?.sqr()?.sum_all()?;
    Ok((dv + dh)?.affine(1.0 / b as f64, 0.0)?)
}

/// `(mean(real) - mean(fake), mean((norms - 1)^2))`.
pub fn wgan_gp(prob_real: &Tensor, prob_fake: &Tensor, grad_norms: &Tensor) -> Result<(Tensor, Tensor)> {
    let wgan = (f64s(prob_real)?.mean_all()? - f64s(prob_fake)?.mean_all()?)?;
    let gp = (f64s(grad_norms)? - 1.0)?.sqr()?.mean_all()?;
    Ok((wgan, gp))
}

/// Per-sample L2 norm of the gradient of the summed patch logits with
/// respect to interpolates `alpha * real + (1 - alpha) * fake`. The result
/// stays attached to the discriminator parameters, so penalties built from
/// it can be differentiated again.
pub fn interpolate_grad_norms(
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    map: &Tensor,
    alpha: &[f32],
) -> Result<Tensor> {
    same_shape(real, fake)?;
    let b = real.dim(0)?;
    if alpha.len() != b {
        return Err(Error::ShapeMismatch(format!("{} mixing weights for a batch of {b}", alpha.len())));
    }
    let a = Tensor::from_slice(alpha, (b, 1, 1, 1), real.device())?;
    let mixed = (real.detach().broadcast_mul(&a)? + fake.detach().broadcast_mul(&a.affine(-1.0, 1.0)?)?)?;
    let g = d.prob_input_gradient(&mixed, map)?;
    Ok(f64s(&g.sqr()?.flatten_from(1)?.sum(1)?)?.sqrt()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub d: f64,
    pub g: f64,
    pub cls: f64,
    pub rec: f64,
    pub idt: f64,
    pub cyc: f64,
    pub tv: f64,
    /// Gradient penalty weight, used only in WGAN mode.
    pub gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            d: 1.0,
            g: 2.0,
            cls: 1.0,
            rec: 100.0,
            idt: 10.0,
            cyc: 10.0,
            tv: 1e-5,
            gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.d, self.g, self.cls, self.rec, self.idt, self.cyc, self.tv, self.gp];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar loss values for one step, serialized as a flat JSON object.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_d: Option<f64>,
    pub gan_g: Option<f64>,
    pub cls_real: Option<f64>,
    pub cls_fake: Option<f64>,
    pub rec: Option<f64>,
    pub idt: Option<f64>,
    pub cyc: Option<f64>,
    pub tv: Option<f64>,
    pub total_d: Option<f64>,
    pub total_g: Option<f64>,
}

impl LossReport {
    /// Fills in `total_d` and `total_g` from the individual terms.
    pub fn with_totals(mut self, w: &LossWeights) -> Result<Self> {
        let (d, g) = total_losses(&self, w)?;
        self.total_d = Some(d);
        self.total_g = Some(g);
        Ok(self)
    }
}

fn term(v: Option<f64>, name: &'static str) -> Result<f64> {
    v.ok_or(Error::IncompleteReport(name))
}

/// `(total_d, total_g)` as the weighted sums of the report terms.
pub fn total_losses(r: &LossReport, w: &LossWeights) -> Result<(f64, f64)> {
    let total_d = w.d * term(r.gan_d, "gan_d")? + w.cls * term(r.cls_real, "cls_real")?;
    let total_g = w.g * term(r.gan_g, "gan_g")?
        + w.rec * term(r.rec, "rec")?
        + w.idt * term(r.idt, "idt")?
        + w.cyc * term(r.cyc, "cyc")?
        + w.cls * term(r.cls_fake, "cls_fake")?
        + w.tv * term(r.tv, "tv")?;
    Ok((total_d, total_g))
}

/// `sum(weight * term)` over scalar tensors.
pub fn weighted_sum(terms: &[(f64, &Tensor)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (w, t) in terms {
        let scaled = t.affine(*w, 0.0)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => (a + scaled)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidConfig("weighted_sum of no terms".into()))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
