//! Conditional critic: a stack of stride-2 convolutions over the image and
//! its conditional map, with a patch realism head and a category head.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::condmap::MAP_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{conv, leaky_relu, seeded_rng, Conv2d, ConvBackend, Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Training resolution; the category head kernel is sized from it.
    pub height: usize,
    pub width: usize,
    pub n_c: usize,
    pub map_channels: usize,
    /// Output width of each stride-2 layer.
    pub widths: Vec<usize>,
    pub negative_slope: f64,
}

impl DiscriminatorConfig {
    /// Six stride-2 layers, 64 up to 2048 channels.
    pub fn new(height: usize, width: usize, n_c: usize) -> Self {
        Self {
            height,
            width,
            n_c,
            map_channels: MAP_CHANNELS,
            widths: vec![64, 128, 256, 512, 1024, 2048],
            negative_slope: 0.01,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    /// Spatial downsampling factor of the backbone.
    pub fn factor(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn backbone_size(&self) -> (usize, usize) {
        (self.height / self.factor(), self.width / self.factor())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidConfig("discriminator widths must be non-empty and positive".into()));
        }
        if self.n_c == 0 {
            return Err(Error::InvalidConfig("n_c must be positive".into()));
        }
        let f = self.factor();
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator resolution {}x{} must be a positive multiple of {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Patch logits `(B, 1, h', w')`, no output activation.
    pub prob_map: Tensor,
    /// `(B, n_c)` category logits.
    pub category_logits: Tensor,
}

#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    layers: Vec<Conv2d>,
    prob_head: Conv2d,
    category_head: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut root = Init::new(&mut params, &mut rng, device);
        let mut init = root.pp("discriminator");
        let mut c_in = 3 + config.map_channels;
        let mut layers = Vec::with_capacity(config.widths.len());
        {
            let mut backbone = init.pp("backbone");
            for (i, &c_out) in config.widths.iter().enumerate() {
                layers.push(Conv2d::new(&mut backbone.pp(i), c_in, c_out, 4, 2, 1, ConvBackend::Im2col)?);
                c_in = c_out;
            }
        }
        let prob_head = Conv2d::new(&mut init.pp("prob_head"), c_in, 1, 4, 1, 1, ConvBackend::Im2col)?;
        let (bh, bw) = config.backbone_size();
        let category_head = if bh == bw {
            Conv2d::new(&mut init.pp("category_head"), c_in, config.n_c, bh, 1, 0, ConvBackend::Im2col)?
        } else {
            return Err(Error::InvalidConfig(format!(
                "category head needs a square backbone map, got {bh}x{bw}"
            )));
        };
        Ok(Self {
            config,
            params,
            layers,
            prob_head,
            category_head,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Backbone features `(B, widths.last, H / 2^L, W / 2^L)`.
    pub fn backbone(&self, image: &Tensor, map: &Tensor) -> Result<Tensor> {
        self.check_inputs(image, map)?;
        let mut x = Tensor::cat(&[image, map], 1)?;
        for layer in &self.layers {
            x = leaky_relu(&layer.forward(&x)?, self.config.negative_slope)?;
        }
        Ok(x)
    }

    fn check_inputs(&self, image: &Tensor, map: &Tensor) -> Result<()> {
        let (b, c, h, w) = image
            .dims4()
            .map_err(|_| Error::ShapeMismatch(format!("image must be (B, 3, H, W), got {:?}", image.dims())))?;
        let (mb, mc, mh, mw) = map
            .dims4()
            .map_err(|_| Error::ShapeMismatch(format!("map must be (B, C, H, W), got {:?}", map.dims())))?;
        if c != 3 || mc != self.config.map_channels || (mb, mh, mw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} and map {:?} do not form a ({b}, {}, {h}, {w}) input",
                image.dims(),
                map.dims(),
                3 + self.config.map_channels
            )));
        }
        let f = self.config.factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator input {h}x{w} must be divisible by {f}"
            )));
        }
        Ok(())
    }

    /// Category logits from backbone features at the training resolution.
    pub fn category_logits(&self, features: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = features.dims4()?;
        if (h, w) != self.config.backbone_size() {
            return Err(Error::ShapeMismatch(format!(
                "category head expects a {:?} backbone map, got {h}x{w}",
                self.config.backbone_size()
            )));
        }
        Ok(self.category_head.forward(features)?.reshape((b, self.config.n_c))?)
    }

    /// Patch logits from backbone features; the 4x4/stride-1/pad-1 head
    /// shrinks each side by one, so a 1x1 map has no valid output.
    pub fn prob_map(&self, features: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = features.dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::ShapeMismatch(format!(
                "patch head needs a backbone map of at least 2x2, got {h}x{w}"
            )));
        }
        self.prob_head.forward(features)
    }

    /// Gradient of the summed patch logits with respect to `image`, written
    /// out as transposed convolutions so that the result stays attached to
    /// the weights and can itself be differentiated.
    pub fn prob_input_gradient(&self, image: &Tensor, map: &Tensor) -> Result<Tensor> {
        self.check_inputs(image, map)?;
        let (b, _, h, w) = image.dims4()?;
        let f = self.config.factor();
        let (fh, fw) = (h / f, w / f);
        if fh < 2 || fw < 2 {
            return Err(Error::ShapeMismatch(format!(
                "patch head needs a backbone map of at least 2x2, got {fh}x{fw}"
            )));
        }
        let mut slopes = Vec::with_capacity(self.layers.len());
        let mut x = Tensor::cat(&[&image.detach(), &map.detach()], 1)?;
        let s = self.config.negative_slope;
        for layer in &self.layers {
            let z = layer.forward(&x)?;
            let positive = z.ge(0.0)?.to_dtype(z.dtype())?;
            slopes.push(positive.affine(1.0 - s, s)?.detach());
            x = leaky_relu(&z, s)?;
        }
        let ones = Tensor::ones((b, 1, fh - 1, fw - 1), x.dtype(), x.device())?;
        let mut g = conv::conv_transpose2d(&ones, self.prob_head.weight(), 1, 1)?;
        for (layer, slope) in self.layers.iter().zip(&slopes).rev() {
            g = conv::conv_transpose2d(&(g * slope)?, layer.weight(), 2, 1)?;
        }
        Ok(g.narrow(1, 0, 3)?)
    }

    pub fn discriminate(&self, image: &Tensor, map: &Tensor) -> Result<DiscriminatorOutput> {
        let features = self.backbone(image, map)?;
        Ok(DiscriminatorOutput {
            prob_map: self.prob_map(&features)?,
            category_logits: self.category_logits(&features)?,
        })
    }
}
