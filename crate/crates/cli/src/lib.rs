//! Operator commands. Each one is reproducible from its flags and seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use deltagan::checkpoint::Checkpoint;
use deltagan::condmap::{MapType, ShapeAnnotation};
use deltagan::datapipe::{pair_id, Dataset, DatasetIndex, LoadOptions, SplitFile, SplitMode, SplitSpec};
use deltagan::imaging::{encode_png, ColorImage};
use deltagan::inference::Translator;
use deltagan::metrics::{evaluate_translations, train_gesture_classifier, ClassifierConfig, FidMode};
use deltagan::trainer::{fit, translate_pairs, FitOptions, TrainConfig};
use deltagan_service::ServeArgs;

#[derive(Debug, Parser)]
#[command(name = "deltagan", version, about = "Gesture-to-gesture translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize every annotation under a dataset root into map PNGs.
    Annotate(AnnotateArgs),
    /// Write a deterministic train/test split to `splits/<name>.json`.
    Split(SplitArgs),
    /// Train a generator and discriminator on the training side of a split.
    Train(TrainArgs),
    /// Translate the pairs of a split and score them.
    Evaluate(EvaluateArgs),
    /// Translate one image offline.
    Translate(TranslateArgs),
    /// Serve the HTTP translation API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, Args)]
pub struct RollingFlags {
    /// Run the second, rolled generator stage.
    #[arg(long, overrides_with = "no_rolling")]
    rolling: bool,
    #[arg(long = "no-rolling", overrides_with = "rolling")]
    no_rolling: bool,
}

impl RollingFlags {
    pub fn get(&self) -> Option<bool> {
        match (self.rolling, self.no_rolling) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    /// Only convert annotations of this kind.
    #[arg(long, value_parser = parse_map_type)]
    pub map_type: Option<MapType>,
    /// Output directory; defaults to `<data-root>/maps`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long, value_parser = parse_split_mode)]
    pub mode: SplitMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Held-out fraction of pairs (normal) or target images (challenging).
    #[arg(long, default_value_t = 0.2)]
    pub ratio: f64,
    /// File stem under `splits/`; defaults to the mode.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    /// Split name under `<data-root>/splits`.
    #[arg(long)]
    pub split: String,
    /// JSON object or `key = value` lines; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub rolling: RollingFlags,
    /// Archive to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Comma-separated category names stored in the checkpoints.
    #[arg(long, value_delimiter = ',')]
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub split: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "correct", value_parser = parse_fid_mode)]
    pub fid_mode: FidMode,
    /// Seed of the evaluation classifier.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub rolling: RollingFlags,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    #[arg(long)]
    pub classifier_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source image (PNG or JPEG).
    #[arg(long)]
    pub image: PathBuf,
    /// JSON shape or annotation record, in source-image coordinates.
    #[arg(long)]
    pub annotation: PathBuf,
    #[arg(long)]
    pub category: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the attention mask here.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[command(flatten)]
    pub rolling: RollingFlags,
}

fn parse_map_type(s: &str) -> std::result::Result<MapType, String> {
    s.parse().map_err(|e: deltagan::Error| e.to_string())
}

fn parse_split_mode(s: &str) -> std::result::Result<SplitMode, String> {
    s.parse().map_err(|e: deltagan::Error| e.to_string())
}

fn parse_fid_mode(s: &str) -> std::result::Result<FidMode, String> {
    s.parse().map_err(|e: deltagan::Error| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Annotate(a) => annotate(&a),
        Command::Split(a) => split(&a),
        Command::Train(a) => train(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Translate(a) => translate(&a),
        Command::Serve(a) => {
            let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
            rt.block_on(deltagan_service::serve(a)).context("server failed")
        }
    }
}

fn stem(image: &str) -> String {
    Path::new(image).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn annotate(args: &AnnotateArgs) -> Result<()> {
    let index = DatasetIndex::load(&args.data_root)?;
    let out = args.out.clone().unwrap_or_else(|| args.data_root.join("maps"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (mut written, mut skipped) = (0, 0);
    for (i, record) in index.records.iter().enumerate() {
        if args.map_type.is_some_and(|t| t != record.shape.map_type()) {
            skipped += 1;
            continue;
        }
        let img = ColorImage::open(index.image_path(i))?;
        let (h, w) = (img.height(), img.width());
        let map = record
            .shape
            .rasterize((h, w), h, w, LoadOptions::new(h, w).stroke)
            .with_context(|| format!("rasterizing {}", record.image))?;
        map.save_png(out.join(format!("{}.png", stem(&record.image))))?;
        written += 1;
    }
    println!("wrote {written} maps to {} ({skipped} skipped)", out.display());
    Ok(())
}

fn split(args: &SplitArgs) -> Result<()> {
    tracing::info!(seed = args.seed, "split");
    let index = DatasetIndex::load(&args.data_root)?;
    let spec = SplitSpec { mode: args.mode, seed: args.seed, test_ratio: args.ratio };
    let file = SplitFile::build(&index.records, &spec)?;
    let name = args.name.clone().unwrap_or_else(|| {
        match args.mode {
            SplitMode::Normal => "normal",
            SplitMode::Challenging => "challenging",
        }
        .to_string()
    });
    let path = index.split_path(&name);
    file.save(&path)?;
    println!("{}: {} train, {} test pairs", path.display(), file.train.len(), file.test.len());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(rolling) = args.rolling.get() {
        config.rolling = rolling;
    }
    let index = DatasetIndex::load(&args.data_root)?;
    let split = SplitFile::load(index.split_path(&args.split))?;
    if split.mode == SplitMode::Challenging && config.swap {
        tracing::info!("challenging split: direction swap disabled");
        config.swap = false;
    }
    tracing::info!(seed = config.seed, rolling = config.rolling, "train");
    let (train_pairs, _) = split.resolve(&index.records)?;
    let data = Dataset::load(&index, LoadOptions::new(config.height, config.width))?;
    let options = FitOptions {
        out_dir: args.out.clone(),
        resume: args.resume.clone(),
        categories: args.categories.clone(),
    };
    let summary = fit(&config, &data, &train_pairs, &options, &Device::Cpu)?;
    println!(
        "trained epochs {:?}; best validation PSNR {:.3} dB at epoch {:?}",
        summary.epochs_run, summary.best_psnr, summary.best_epoch
    );
    for path in &summary.checkpoints {
        println!("{}", path.display());
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    tracing::info!(seed = args.seed, "evaluate");
    let device = Device::Cpu;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let generator = ck.build_generator(&device)?;
    let g = generator.config().clone();
    let index = DatasetIndex::load(&args.data_root)?;
    let (train_pairs, test_pairs) = SplitFile::load(index.split_path(&args.split))?.resolve(&index.records)?;
    let pairs = match args.subset {
        Subset::Train => train_pairs,
        Subset::Test => test_pairs,
    };
    if pairs.is_empty() {
        bail!("split `{}` has no {:?} pairs", args.split, args.subset);
    }
    let data = Dataset::load(&index, LoadOptions::new(g.height, g.width))?;
    if data.n_categories() > g.n_c {
        bail!("dataset has {} categories, checkpoint was trained for {}", data.n_categories(), g.n_c);
    }
    let rolling = args.rolling.get().unwrap_or(true);
    let generated = translate_pairs(&generator, &data, &pairs, rolling, 4, &device)?;

    let mut cfg = ClassifierConfig { seed: args.seed, ..Default::default() };
    if let Some(epochs) = args.classifier_epochs {
        cfg.epochs = epochs;
    }
    let labels: Vec<usize> = data.records.iter().map(|r| r.category).collect();
    let (classifier, creport) = train_gesture_classifier(&data.images, &labels, &cfg, &device)?;
    tracing::info!(test_f1 = ?creport.test_f1, "classifier trained");

    let targets: Vec<ColorImage> = pairs.iter().map(|p| data.images[p.target].clone()).collect();
    let target_labels: Vec<usize> = pairs.iter().map(|p| data.records[p.target].category).collect();
    let ids: Vec<String> = pairs.iter().map(|&p| pair_id(&data.records, p)).collect();
    let report = evaluate_translations(&classifier, &generated, &targets, &target_labels, &ids, args.fid_mode)?;
    println!("{}", report.table());
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&report)? + "\n";
        std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn translate(args: &TranslateArgs) -> Result<()> {
    let model = Translator::load(&args.checkpoint, &Device::Cpu)?;
    let source = ColorImage::open(&args.image)?;
    let text = std::fs::read_to_string(&args.annotation).with_context(|| format!("reading {}", args.annotation.display()))?;
    let shape = ShapeAnnotation::parse(&text)?;
    let out = model.translate(&source, &shape, args.category, args.rolling.get().unwrap_or(true))?;
    out.image.save_png(&args.out)?;
    if let Some(path) = &args.mask {
        std::fs::write(path, encode_png(&out.mask)?).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", args.out.display());
    Ok(())
}
