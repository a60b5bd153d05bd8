//! Alternating discriminator/generator optimization with rolling guidance,
//! the history buffer, the step learning-rate schedule and checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
use crate::condmap::condition_batch;
use crate::datapipe::{augment, Augmentation, Batch, Dataset, ImageBuffer, SamplePair};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorOutput};
use crate::imaging::ColorImage;
use crate::losses::{
    category_ce, gan_loss, interpolate_grad_norms, l1_reconstruction, scalar, tv_regularizer, wgan_gp,
    weighted_sum, LossReport, LossWeights, Side,
};
use crate::metrics::{aggregate_psnr, psnr_images};
use crate::nn::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversarial {
    /// Cross-entropy patch loss.
    Gan,
    /// Wasserstein critic with gradient penalty.
    WganGp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub height: usize,
    pub width: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Final epochs over which the rate decays linearly to zero.
    pub decay_epochs: usize,
    pub rolling: bool,
    pub weights: LossWeights,
    pub adversarial: Adversarial,
    pub seed: u64,
    pub buffer_capacity: usize,
    /// Horizontal flip augmentation.
    pub flip: bool,
    /// Random source/target direction swap; forced off for challenging splits.
    pub swap: bool,
    /// Fraction of training pairs held out to pick the best checkpoint.
    pub validation_fraction: f64,
    /// Divides every generator width (1 = full size).
    pub generator_slim: usize,
    /// Discriminator stride-2 layer widths; `None` uses the six-layer stack.
    pub discriminator_widths: Option<Vec<usize>>,
    /// Caps optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 256,
            batch_size: 4,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 20,
            decay_epochs: 10,
            rolling: true,
            weights: LossWeights::default(),
            adversarial: Adversarial::Gan,
            seed: 0,
            buffer_capacity: ImageBuffer::<()>::DEFAULT_CAPACITY,
            flip: true,
            swap: true,
            validation_fraction: 0.05,
            generator_slim: 1,
            discriminator_widths: None,
            max_steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.decay_epochs > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "decay span {} must not exceed {} epochs (and epochs must be positive)",
                self.decay_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation fraction must be in [0, 1)".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        self.weights.validate()
    }

    /// Rate for `epoch` (counted from zero): constant, then linear decay over
    /// the final `decay_epochs` so that it would reach zero at `epochs`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        lr_at(self.learning_rate, self.epochs, self.decay_epochs, epoch)
    }

    pub fn generator_config(&self, n_c: usize) -> GeneratorConfig {
        GeneratorConfig::new(self.height, self.width, n_c).slimmed(self.generator_slim)
    }

    pub fn discriminator_config(&self, n_c: usize) -> DiscriminatorConfig {
        let cfg = DiscriminatorConfig::new(self.height, self.width, n_c);
        match &self.discriminator_widths {
            Some(w) => cfg.with_widths(w.clone()),
            None => cfg,
        }
    }

    /// Reads a JSON object or `key = value` lines; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let value = if trimmed.starts_with('{') {
            serde_json::from_str(text)?
        } else {
            let mut map = serde_json::Map::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
                let v = v.trim();
                let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
                insert_dotted(&mut map, k.trim(), parsed);
            }
            serde_json::Value::Object(map)
        };
        let known = serde_json::to_value(Self::default())?;
        check_keys(&value, &known, "")?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn insert_dotted(map: &mut serde_json::Map<String, serde_json::Value>, key: &str, v: serde_json::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let entry = map
                .entry(head.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            if let serde_json::Value::Object(inner) = entry {
                insert_dotted(inner, rest, v);
            }
        }
        None => {
            map.insert(key.to_string(), v);
        }
    }
}

fn check_keys(value: &serde_json::Value, known: &serde_json::Value, prefix: &str) -> Result<()> {
    let (Some(obj), Some(known_obj)) = (value.as_object(), known.as_object()) else {
        return Ok(());
    };
    for (k, v) in obj {
        let Some(kv) = known_obj.get(k) else {
            return Err(Error::InvalidConfig(format!("unknown config key `{prefix}{k}`")));
        };
        check_keys(v, kv, &format!("{prefix}{k}."))?;
    }
    Ok(())
}

/// Learning rate for `epoch` in `[0, total)`.
pub fn lr_at(base: f64, total: usize, decay: usize, epoch: usize) -> Result<f64> {
    if epoch >= total {
        return Err(Error::InvalidEpoch { epoch, total });
    }
    Ok(schedule(base, total, decay, epoch))
}

/// The schedule formula without the range check; `epoch == total` gives the
/// terminal value 0 whenever `decay > 0`.
pub fn schedule(base: f64, total: usize, decay: usize, epoch: usize) -> f64 {
    let start = total.saturating_sub(decay);
    if epoch < start {
        base
    } else {
        base * (total.saturating_sub(epoch) as f64 / decay as f64)
    }
}

/// Per-step record written to the JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// Stacks single images `(3, H, W)` and maps `(1, H, W)` drawn from the buffer.
type BufferItem = (Tensor, Tensor);

/// Output of the main generator pass shared by the D and G steps.
pub struct StepForward {
    pub cond_x: Tensor,
    pub output: GeneratorOutput,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    g_opt: AdamW,
    d_opt: AdamW,
    buffer: ImageBuffer<BufferItem>,
    rng: ChaCha8Rng,
    device: Device,
    n_c: usize,
    steps: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, n_c: usize, device: &Device) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config(n_c), config.seed, device)?;
        let discriminator = Discriminator::new(config.discriminator_config(n_c), config.seed.wrapping_add(1), device)?;
        Self::from_models(config, generator, discriminator, device)
    }

    pub fn from_models(config: TrainConfig, generator: Generator, discriminator: Discriminator, device: &Device) -> Result<Self> {
        config.validate()?;
        let n_c = generator.config().n_c;
        if discriminator.config().n_c != n_c {
            return Err(Error::InvalidConfig("generator and discriminator disagree on n_c".into()));
        }
        let params = ParamsAdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let g_opt = AdamW::new(generator.params().vars(), params.clone())?;
        let d_opt = AdamW::new(discriminator.params().vars(), params)?;
        Ok(Self {
            buffer: ImageBuffer::new(config.buffer_capacity),
            rng: seeded_rng(config.seed.wrapping_add(2)),
            g_opt,
            d_opt,
            generator,
            discriminator,
            device: device.clone(),
            n_c,
            steps: 0,
            config,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.g_opt.set_learning_rate(lr);
        self.d_opt.set_learning_rate(lr);
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn replay(&mut self, fake: &Tensor, maps: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = fake.dim(0)?;
        let (mut images, mut conds) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for i in 0..b {
            let item = (fake.get(i)?.detach(), maps.get(i)?.detach());
            let (img, map) = self.buffer.push_sample(item, &mut self.rng);
            images.push(img);
            conds.push(map);
        }
        Ok((Tensor::stack(&images, 0)?, Tensor::stack(&conds, 0)?))
    }

    fn adversarial_d(&mut self, real: &Tensor, fake: &Tensor, real_map: &Tensor, real_prob: &Tensor, fake_prob: &Tensor) -> Result<Tensor> {
        match self.config.adversarial {
            Adversarial::Gan => gan_loss(real_prob, fake_prob, Side::Discriminator),
            Adversarial::WganGp => {
                // Interpolates are judged under the real map.
                let alpha: Vec<f32> = (0..real.dim(0)?).map(|_| self.rng.random::<f32>()).collect();
                let norms = interpolate_grad_norms(&self.discriminator, real, fake, real_map, &alpha)?;
                let (wgan, gp) = wgan_gp(real_prob, fake_prob, &norms)?;
                Ok((gp.affine(self.config.weights.gp, 0.0)? - wgan)?)
            }
        }
    }

    fn adversarial_g(&self, fake_prob: &Tensor) -> Result<Tensor> {
        match self.config.adversarial {
            Adversarial::Gan => gan_loss(fake_prob, fake_prob, Side::Generator),
            Adversarial::WganGp => Ok(fake_prob.to_dtype(candle_core::DType::F64)?.mean_all()?.neg()?),
        }
    }

    /// Conditions and the (possibly rolled) generator output for a batch,
    /// still attached to the generator parameters.
    pub fn forward(&self, batch: &Batch) -> Result<StepForward> {
        let cond_y = condition_batch(&batch.target_map, &batch.target_labels, self.n_c, None)?;
        let cond_x = condition_batch(&batch.source_map, &batch.source_labels, self.n_c, None)?;
        let output = self.generator.generate_rolled(&batch.source, &cond_y, self.config.rolling)?.last().clone();
        Ok(StepForward { cond_x, output })
    }

    /// Updates the discriminator on real targets and replayed fakes; fills
    /// `gan_d` and `cls_real`.
    pub fn discriminator_step(&mut self, batch: &Batch, fwd: &StepForward) -> Result<LossReport> {
        let w = self.config.weights;
        let (fake_replay, fake_maps) = self.replay(&fwd.output.composite, &batch.target_map)?;
        let real = self.discriminator.discriminate(&batch.target, &batch.target_map)?;
        let fake_feats = self.discriminator.backbone(&fake_replay, &fake_maps)?;
        let fake_prob = self.discriminator.prob_map(&fake_feats)?;
        let gan_d = self.adversarial_d(&batch.target, &fake_replay, &batch.target_map, &real.prob_map, &fake_prob)?;
        let cls_real = category_ce(&real.category_logits, &batch.target_labels)?;
        let total_d = weighted_sum(&[(w.d, &gan_d), (w.cls, &cls_real)])?;
        self.d_opt.step(&total_d.backward()?)?;
        Ok(LossReport {
            gan_d: Some(scalar(&gan_d)?),
            cls_real: Some(scalar(&cls_real)?),
            ..LossReport::default()
        })
    }

    /// Updates the generator; identity and cycle passes share one forward.
    pub fn generator_step(&mut self, batch: &Batch, fwd: &StepForward) -> Result<LossReport> {
        let w = self.config.weights;
        let out = &fwd.output;
        let judged = self.discriminator.discriminate(&out.composite, &batch.target_map)?;
        let gan_g = self.adversarial_g(&judged.prob_map)?;
        let cls_fake = category_ce(&judged.category_logits, &batch.target_labels)?;
        let rec = l1_reconstruction(&out.composite, &batch.target)?;
        let b = batch.len();
        let back_sources = Tensor::cat(&[&batch.source, &out.composite], 0)?;
        let back_cond = Tensor::cat(&[&fwd.cond_x, &fwd.cond_x], 0)?;
        let back = self.generator.generate(&back_sources, &back_cond)?;
        let idt = l1_reconstruction(&back.composite.narrow(0, 0, b)?, &batch.source)?;
        let cyc = l1_reconstruction(&back.composite.narrow(0, b, b)?, &batch.source)?;
        let tv = (tv_regularizer(&out.proposal)? + tv_regularizer(&back.proposal.narrow(0, 0, b)?)?)?;
        let total_g = weighted_sum(&[
            (w.g, &gan_g),
            (w.rec, &rec),
            (w.idt, &idt),
            (w.cyc, &cyc),
            (w.cls, &cls_fake),
            (w.tv, &tv),
        ])?;
        self.g_opt.step(&total_g.backward()?)?;
        Ok(LossReport {
            gan_g: Some(scalar(&gan_g)?),
            cls_fake: Some(scalar(&cls_fake)?),
            rec: Some(scalar(&rec)?),
            idt: Some(scalar(&idt)?),
            cyc: Some(scalar(&cyc)?),
            tv: Some(scalar(&tv)?),
            ..LossReport::default()
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let fwd = self.forward(batch)?;
        let d = self.discriminator_step(batch, &fwd)?;
        let g = self.generator_step(batch, &fwd)?;
        self.steps += 1;
        LossReport {
            gan_d: d.gan_d,
            cls_real: d.cls_real,
            ..g
        }
        .with_totals(&self.config.weights)
    }

    /// Final composites for `pairs`, without augmentation.
    pub fn translate_pairs(&self, data: &Dataset, pairs: &[SamplePair]) -> Result<Vec<ColorImage>> {
        translate_pairs(&self.generator, data, pairs, self.config.rolling, self.config.batch_size, &self.device)
    }

    pub fn checkpoint(&self, epoch: usize, categories: &[String]) -> Result<Checkpoint> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            generator: self.generator.config().clone(),
            discriminator: Some(self.discriminator.config().clone()),
            epoch,
            categories: categories.to_vec(),
        };
        Checkpoint::capture(header, &self.generator, Some(&self.discriminator))
    }
}

/// Runs the generator over `pairs` in batches and returns the final composites.
pub fn translate_pairs(
    generator: &Generator,
    data: &Dataset,
    pairs: &[SamplePair],
    rolling: bool,
    batch_size: usize,
    device: &Device,
) -> Result<Vec<ColorImage>> {
    let n_c = generator.config().n_c;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let samples: Vec<_> = chunk.iter().map(|&p| data.sample(p)).collect();
        let batch = Batch::from_samples(&samples, device)?;
        let cond = condition_batch(&batch.target_map, &batch.target_labels, n_c, None)?;
        let composite = generator.generate_rolled(&batch.source, &cond, rolling)?.last().composite.detach();
        for i in 0..chunk.len() {
            out.push(ColorImage::from_tensor(&composite.get(i)?)?);
        }
    }
    Ok(out)
}

/// Mean finite PSNR of translated pairs against their targets.
pub fn validation_psnr(generator: &Generator, data: &Dataset, pairs: &[SamplePair], rolling: bool, device: &Device) -> Result<f64> {
    let outputs = translate_pairs(generator, data, pairs, rolling, 4, device)?;
    let values = outputs
        .iter()
        .zip(pairs)
        .map(|(o, p)| psnr_images(o, &data.images[p.target]))
        .collect::<Result<Vec<_>>>()?;
    let summary = aggregate_psnr(&values);
    Ok(if summary.finite_count == 0 && summary.infinite_count > 0 { f64::INFINITY } else { summary.mean })
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Archive to resume from; training continues at the following epoch.
    pub resume: Option<PathBuf>,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    /// Every archive written, in order.
    pub checkpoints: Vec<PathBuf>,
    pub best_psnr: f64,
    pub best_epoch: Option<usize>,
    pub epochs_run: Vec<usize>,
    pub last_report: Option<LossReport>,
}

/// Splits off `fraction` of `pairs` (at least one when there are two or
/// more) as a validation set.
pub fn hold_out(pairs: &[SamplePair], fraction: f64, rng: &mut impl Rng) -> (Vec<SamplePair>, Vec<SamplePair>) {
    if pairs.len() < 2 || fraction <= 0.0 {
        return (pairs.to_vec(), Vec::new());
    }
    let n_val = ((fraction * pairs.len() as f64).round() as usize).clamp(1, pairs.len() - 1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let val: std::collections::BTreeSet<usize> = order.into_iter().take(n_val).collect();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        if val.contains(&i) {
            valid.push(*p);
        } else {
            train.push(*p);
        }
    }
    (train, valid)
}

/// Trains over `pairs` for the configured epochs, writing a JSONL loss log,
/// one archive per epoch and `best.safetensors` by validation PSNR.
pub fn fit(config: &TrainConfig, data: &Dataset, pairs: &[SamplePair], options: &FitOptions, device: &Device) -> Result<FitSummary> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_c = options.categories.len().max(data.n_categories());
    let mut trainer = Trainer::new(config.clone(), n_c, device)?;
    let mut first_epoch = 0;
    if let Some(path) = &options.resume {
        let ck = Checkpoint::load(path)?;
        ck.restore_generator(&trainer.generator, device)?;
        ck.restore_discriminator(&trainer.discriminator, device)?;
        first_epoch = ck.header.epoch + 1;
    }
    let (train, valid) = hold_out(pairs, config.validation_fraction, &mut seeded_rng(config.seed.wrapping_add(3)));
    let valid = if valid.is_empty() { train.clone() } else { valid };
    let out = &options.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("losses.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut summary = FitSummary {
        checkpoints: Vec::new(),
        best_psnr: f64::NEG_INFINITY,
        best_epoch: None,
        epochs_run: Vec::new(),
        last_report: None,
    };
    let mut order_rng = seeded_rng(config.seed.wrapping_add(4));
    for epoch in first_epoch..config.epochs {
        let lr = config.lr_at(epoch)?;
        trainer.set_learning_rate(lr);
        let mut order = train.clone();
        order.shuffle(&mut order_rng);
        let mut steps = order.chunks(config.batch_size).collect::<Vec<_>>();
        if let Some(cap) = config.max_steps_per_epoch {
            steps.truncate(cap);
        }
        for (step, chunk) in steps.into_iter().enumerate() {
            let samples = chunk
                .iter()
                .map(|&p| {
                    let aug = Augmentation::sample(trainer.rng(), config.swap);
                    augment(&data.sample(p), Augmentation { flip: aug.flip && config.flip, swap: aug.swap })
                })
                .collect::<Vec<_>>();
            let batch = Batch::from_samples(&samples, device)?;
            let report = trainer.train_step(&batch)?;
            let line = serde_json::to_string(&StepLog { epoch, step, lr, losses: report })?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            tracing::debug!(epoch, step, total_g = report.total_g, total_d = report.total_d, "step");
            summary.last_report = Some(report);
        }
        let ck = trainer.checkpoint(epoch, &options.categories)?;
        let path = out.join(format!("epoch_{epoch:03}.safetensors"));
        ck.save(&path)?;
        summary.checkpoints.push(path);
        let psnr = validation_psnr(&trainer.generator, data, &valid, config.rolling, device)?;
        tracing::info!(epoch, lr, validation_psnr = psnr, "epoch finished");
        if summary.best_epoch.is_none() || psnr > summary.best_psnr {
            let best = out.join("best.safetensors");
            ck.save(&best)?;
            if !summary.checkpoints.contains(&best) {
                summary.checkpoints.push(best);
            }
            summary.best_psnr = psnr;
            summary.best_epoch = Some(epoch);
        }
        summary.epochs_run.push(epoch);
    }
    Ok(summary)
}
