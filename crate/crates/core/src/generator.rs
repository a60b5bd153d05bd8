//! The translation generator: a source encoder and a condition encoder feed
//! a residual trunk; the decoder predicts a color proposal and an attention
//! mask that are blended with the source image. Rolling guidance runs the
//! network a second time with the first composite appended to the condition.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::condmap::{MAP_CHANNELS, ROLLED_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, Conv2d, ConvBackend, ConvTranspose2d, Init, InstanceNorm, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Training resolution; the network itself accepts any size divisible by 4.
    pub height: usize,
    pub width: usize,
    pub n_c: usize,
    pub source_widths: [usize; 3],
    pub condition_widths: [usize; 3],
    pub trunk_width: usize,
    pub decoder_widths: [usize; 2],
    pub res_blocks: usize,
}

impl GeneratorConfig {
    /// The reference layer widths: source encoder 64/128/256, condition
    /// encoder 64/64/64, trunk 256 with six residual blocks, decoder 128/64.
    pub fn new(height: usize, width: usize, n_c: usize) -> Self {
        Self {
            height,
            width,
            n_c,
            source_widths: [64, 128, 256],
            condition_widths: [64, 64, 64],
            trunk_width: 256,
            decoder_widths: [128, 64],
            res_blocks: 6,
        }
    }

    /// Divides every layer width by `divisor` (rounding up), keeping depth.
    pub fn slimmed(mut self, divisor: usize) -> Self {
        let d = |w: usize| w.div_ceil(divisor.max(1));
        self.source_widths = self.source_widths.map(d);
        self.condition_widths = self.condition_widths.map(d);
        self.trunk_width = d(self.trunk_width);
        self.decoder_widths = self.decoder_widths.map(d);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "generator resolution {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.n_c == 0 {
            return Err(Error::InvalidConfig("n_c must be positive".into()));
        }
        let widths = self
            .source_widths
            .iter()
            .chain(&self.condition_widths)
            .chain(&self.decoder_widths)
            .chain(std::iter::once(&self.trunk_width));
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Condition channels in the first stage (`map + one-hot`).
    pub fn stage1_channels(&self) -> usize {
        MAP_CHANNELS + self.n_c
    }

    /// Condition channels with the rolled-back image appended.
    pub fn stage2_channels(&self) -> usize {
        self.stage1_channels() + ROLLED_CHANNELS
    }
}

/// Tensors produced by one generator pass, all `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// Color proposal from the tanh head, in [-1, 1].
    pub proposal: Tensor,
    /// Attention mask from the sigmoid head, in [0, 1], one channel.
    pub attention: Tensor,
    /// `attention * source + (1 - attention) * proposal`.
    pub composite: Tensor,
}

/// Attention compositing: keeps source pixels where the mask is high.
pub fn composite(source: &Tensor, attention: &Tensor, proposal: &Tensor) -> Result<Tensor> {
    let keep = attention.broadcast_mul(source)?;
    let inverse = attention.affine(-1.0, 1.0)?;
    Ok((keep + inverse.broadcast_mul(proposal)?)?)
}

/// Both stages of a rolled generation; `refined` is absent when rolling is off.
#[derive(Debug, Clone)]
pub struct RolledOutput {
    pub initial: GeneratorOutput,
    pub refined: Option<GeneratorOutput>,
}

impl RolledOutput {
    /// The output that losses and evaluation consume.
    pub fn last(&self) -> &GeneratorOutput {
        self.refined.as_ref().unwrap_or(&self.initial)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ConvBlock {
    fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, s: usize, p: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut init.pp("conv"), c_in, c_out, k, s, p, ConvBackend::Im2col)?,
            norm: InstanceNorm::new(&mut init.pp("norm"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    inner: ConvBlock,
    conv: Conv2d,
    norm: InstanceNorm,
}

impl ResBlock {
    fn new(init: &mut Init, c: usize) -> Result<Self> {
        Ok(Self {
            inner: ConvBlock::new(&mut init.pp("inner"), c, c, 3, 1, 1)?,
            conv: Conv2d::new(&mut init.pp("conv"), c, c, 3, 1, 1, ConvBackend::Im2col)?,
            norm: InstanceNorm::new(&mut init.pp("norm"), c)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.conv.forward(&self.inner.forward(x)?)?)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    deconv: ConvTranspose2d,
    norm: InstanceNorm,
}

impl UpBlock {
    fn new(init: &mut Init, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            deconv: ConvTranspose2d::new(&mut init.pp("deconv"), c_in, c_out, 4, 2, 1)?,
            norm: InstanceNorm::new(&mut init.pp("norm"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.deconv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    source_encoder: [ConvBlock; 3],
    /// First condition layer; sized for the rolled condition and narrowed to
    /// the leading channels in the first stage.
    condition_head: ConvBlock,
    condition_encoder: [ConvBlock; 2],
    fuse_in: ConvBlock,
    trunk: Vec<ResBlock>,
    fuse_out: ConvBlock,
    decoder: [UpBlock; 2],
    color_head: Conv2d,
    attention_head: Conv2d,
    forward_passes: AtomicUsize,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut root = Init::new(&mut params, &mut rng, device);
        let mut init = root.pp("generator");
        let [s0, s1, s2] = config.source_widths;
        let [c0, c1, c2] = config.condition_widths;
        let [d0, d1] = config.decoder_widths;
        let t = config.trunk_width;

        let mut e1 = init.pp("source_encoder");
        let source_encoder = [
            ConvBlock::new(&mut e1.pp(0), 3, s0, 7, 1, 3)?,
            ConvBlock::new(&mut e1.pp(1), s0, s1, 3, 2, 1)?,
            ConvBlock::new(&mut e1.pp(2), s1, s2, 3, 2, 1)?,
        ];
        let mut e2 = init.pp("condition_encoder");
        let condition_head = ConvBlock::new(&mut e2.pp(0), config.stage2_channels(), c0, 7, 1, 3)?;
        let condition_encoder = [
            ConvBlock::new(&mut e2.pp(1), c0, c1, 3, 2, 1)?,
            ConvBlock::new(&mut e2.pp(2), c1, c2, 3, 2, 1)?,
        ];
        let fuse_in = ConvBlock::new(&mut init.pp("fuse_in"), s2 + c2, t, 3, 1, 1)?;
        let mut res = init.pp("trunk");
        let trunk = (0..config.res_blocks)
            .map(|i| ResBlock::new(&mut res.pp(i), t))
            .collect::<Result<Vec<_>>>()?;
        let fuse_out = ConvBlock::new(&mut init.pp("fuse_out"), t + c2, t, 3, 1, 1)?;
        let mut dec = init.pp("decoder");
        let decoder = [UpBlock::new(&mut dec.pp(0), t, d0)?, UpBlock::new(&mut dec.pp(1), d0, d1)?];
        let color_head = Conv2d::new(&mut init.pp("color_head"), d1, 3, 7, 1, 3, ConvBackend::Im2col)?;
        let attention_head =
            Conv2d::new(&mut init.pp("attention_head"), d1, 1, 7, 1, 3, ConvBackend::Im2col)?;
        Ok(Self {
            config,
            params,
            source_encoder,
            condition_head,
            condition_encoder,
            fuse_in,
            trunk,
            fuse_out,
            decoder,
            color_head,
            attention_head,
            forward_passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Number of full generator passes run so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
    }

    fn check_spatial(&self, what: &str, t: &Tensor, channels: &[usize]) -> Result<(usize, usize, usize)> {
        let (b, c, h, w) = t
            .dims4()
            .map_err(|_| Error::ShapeMismatch(format!("{what} must be (B, C, H, W), got {:?}", t.dims())))?;
        if !channels.contains(&c) {
            return Err(Error::ShapeMismatch(format!(
                "{what} has {c} channels, expected one of {channels:?}"
            )));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{what} is {h}x{w}; both sides must be multiples of 4"
            )));
        }
        Ok((b, h, w))
    }

    /// Source features at a quarter of the input resolution.
    pub fn encode_source(&self, source: &Tensor) -> Result<Tensor> {
        self.check_spatial("source image", source, &[3])?;
        let mut h = source.clone();
        for block in &self.source_encoder {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    /// Condition features at a quarter of the input resolution; accepts the
    /// first-stage or the rolled condition.
    pub fn encode_condition(&self, condition: &Tensor) -> Result<Tensor> {
        let (s1, s2) = (self.config.stage1_channels(), self.config.stage2_channels());
        let (_, c, _, _) = condition.dims4().map_err(|_| {
            Error::ShapeMismatch(format!("condition must be (B, C, H, W), got {:?}", condition.dims()))
        })?;
        self.check_spatial("condition", condition, &[s1, s2])?;
        let weight = self.condition_head.conv.weight();
        let first = if c == s2 {
            self.condition_head.conv.forward(condition)?
        } else {
            let narrowed = weight.narrow(1, 0, s1)?;
            self.condition_head.conv.forward_with_weight(condition, &narrowed)?
        };
        let mut h = self.condition_head.norm.forward(&first)?.relu()?;
        for block in &self.condition_encoder {
            h = block.forward(&h)?;
        }
        Ok(h)
    }

    /// One generator pass. `condition` is `(B, 1 + n_c [+ 3], H, W)`.
    pub fn generate(&self, source: &Tensor, condition: &Tensor) -> Result<GeneratorOutput> {
        let (b, h, w) = self.check_spatial("source image", source, &[3])?;
        let (cb, _, ch, cw) = condition.dims4()?;
        if (cb, ch, cw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "source {:?} and condition {:?} disagree",
                source.dims(),
                condition.dims()
            )));
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let source_features = self.encode_source(source)?;
        let condition_features = self.encode_condition(condition)?;
        let mut x = self
            .fuse_in
            .forward(&Tensor::cat(&[&source_features, &condition_features], 1)?)?;
        for block in &self.trunk {
            x = block.forward(&x)?;
        }
        x = self.fuse_out.forward(&Tensor::cat(&[&x, &condition_features], 1)?)?;
        for block in &self.decoder {
            x = block.forward(&x)?;
        }
        let proposal = self.color_head.forward(&x)?.tanh()?;
        let attention = crate::nn::sigmoid(&self.attention_head.forward(&x)?)?;
        let composite = composite(source, &attention, &proposal)?;
        Ok(GeneratorOutput {
            proposal,
            attention,
            composite,
        })
    }

    /// Two-stage generation: the first composite is detached and appended to
    /// the condition for a second pass. With `rolling` off only the first
    /// stage runs.
    pub fn generate_rolled(&self, source: &Tensor, condition: &Tensor, rolling: bool) -> Result<RolledOutput> {
        let (_, c, _, _) = condition.dims4()?;
        if c != self.config.stage1_channels() {
            return Err(Error::ShapeMismatch(format!(
                "rolled generation takes the first-stage condition ({} channels), got {c}",
                self.config.stage1_channels()
            )));
        }
        let initial = self.generate(source, condition)?;
        let refined = if rolling {
            let rolled = initial.composite.detach();
            let condition2 = Tensor::cat(&[condition, &rolled], 1)?;
            Some(self.generate(source, &condition2)?)
        } else {
            None
        };
        Ok(RolledOutput { initial, refined })
    }

    pub fn generate_with_rolling(&self, source: &Tensor, condition: &Tensor) -> Result<(GeneratorOutput, GeneratorOutput)> {
        let out = self.generate_rolled(source, condition, true)?;
        Ok((out.initial, out.refined.expect("rolling requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condmap::condition_batch;

    fn tiny(n_c: usize) -> GeneratorConfig {
        GeneratorConfig::new(16, 16, n_c).slimmed(16)
    }

    fn inputs(b: usize, h: usize, w: usize, n_c: usize, seed: u64) -> (Tensor, Tensor) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let src: Vec<f32> = (0..b * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map: Vec<f32> = (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let src = Tensor::from_vec(src, (b, 3, h, w), &dev).unwrap();
        let map = Tensor::from_vec(map, (b, 1, h, w), &dev).unwrap();
        let labels: Vec<usize> = (0..b).map(|i| i % n_c).collect();
        (src, condition_batch(&map, &labels, n_c, None).unwrap())
    }

    #[test]
    fn output_shapes_and_ranges() {
        let g = Generator::new(tiny(5), 0, &Device::Cpu).unwrap();
        let (src, cond) = inputs(2, 16, 24, 5, 1);
        let out = g.generate(&src, &cond).unwrap();
        assert_eq!(out.proposal.dims(), &[2, 3, 16, 24]);
        assert_eq!(out.attention.dims(), &[2, 1, 16, 24]);
        assert_eq!(out.composite.dims(), &[2, 3, 16, 24]);
        let a: Vec<f32> = out.attention.flatten_all().unwrap().to_vec1().unwrap();
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let p: Vec<f32> = out.proposal.flatten_all().unwrap().to_vec1().unwrap();
        assert!(p.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn encoders_reject_bad_shapes() {
        let g = Generator::new(tiny(10), 0, &Device::Cpu).unwrap();
        let odd = Tensor::zeros((1, 3, 18, 18), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.encode_source(&odd), Err(Error::ShapeMismatch(_))));
        let nine = Tensor::zeros((1, 9, 16, 16), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.encode_condition(&nine), Err(Error::ShapeMismatch(_))));
        let (src, cond) = inputs(1, 16, 16, 10, 0);
        assert_eq!(g.encode_condition(&cond).unwrap().dims(), &[1, 4, 4, 4]);
        let (src2, _) = inputs(1, 8, 8, 10, 0);
        assert!(g.generate(&src2, &cond).is_err());
        assert_eq!(g.encode_source(&src).unwrap().dims(), &[1, 16, 4, 4]);
    }

    #[test]
    fn generation_is_deterministic() {
        let g = Generator::new(tiny(3), 7, &Device::Cpu).unwrap();
        let (src, cond) = inputs(2, 16, 16, 3, 2);
        let a = g.generate(&src, &cond).unwrap().composite.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = g.generate(&src, &cond).unwrap().composite.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        let g2 = Generator::new(tiny(3), 7, &Device::Cpu).unwrap();
        let c = g2.generate(&src, &cond).unwrap().composite.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn parameter_count_ignores_resolution() {
        let a = Generator::new(GeneratorConfig::new(16, 16, 4).slimmed(8), 0, &Device::Cpu).unwrap();
        let b = Generator::new(GeneratorConfig::new(64, 128, 4).slimmed(8), 0, &Device::Cpu).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
    }

    #[test]
    fn rolling_runs_two_passes() {
        let g = Generator::new(tiny(4), 3, &Device::Cpu).unwrap();
        let (src, cond) = inputs(1, 16, 16, 4, 3);
        let out = g.generate_rolled(&src, &cond, false).unwrap();
        assert!(out.refined.is_none());
        assert_eq!(g.forward_passes(), 1);
        let (s1, s2) = g.generate_with_rolling(&src, &cond).unwrap();
        assert_eq!(g.forward_passes(), 3);
        assert_eq!(s1.composite.dims(), s2.composite.dims());
        let diff = (s1.composite - s2.composite).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(GeneratorConfig::new(30, 32, 10).validate().is_err());
        assert!(GeneratorConfig::new(32, 32, 0).validate().is_err());
        assert!(GeneratorConfig::new(256, 256, 10).validate().is_ok());
    }
}
