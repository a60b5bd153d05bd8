use candle_core::Device;
use deltagan::checkpoint::Checkpoint;
use deltagan::datapipe::synthetic::{SyntheticSet, SyntheticSpec};
use deltagan::datapipe::{build_pairs, Batch, Dataset, LoadOptions, Pairing, SamplePair};
use deltagan::losses::LossWeights;
use deltagan::trainer::{fit, FitOptions, StepLog, TrainConfig, Trainer};
use deltagan::Error;

const SIZE: usize = 16;

fn data() -> (Dataset, Vec<SamplePair>) {
    let set = SyntheticSet::generate(&SyntheticSpec {
        subjects: 1,
        scenes_per_subject: 2,
        images_per_scene: 3,
        n_c: 3,
        height: SIZE,
        width: SIZE,
        seed: 3,
    })
    .unwrap();
    let pairs = build_pairs(&set.records, Pairing::Ordered);
    let ds = Dataset::from_memory(set.records, set.images, LoadOptions::new(SIZE, SIZE)).unwrap();
    (ds, pairs)
}

fn config() -> TrainConfig {
    TrainConfig {
        height: SIZE,
        width: SIZE,
        generator_slim: 16,
        discriminator_widths: Some(vec![8, 8]),
        epochs: 2,
        decay_epochs: 1,
        ..TrainConfig::default()
    }
}

fn batch(ds: &Dataset, pairs: &[SamplePair]) -> Batch {
    let samples: Vec<_> = pairs.iter().map(|&p| ds.sample(p)).collect();
    Batch::from_samples(&samples, &Device::Cpu).unwrap()
}

#[test]
fn identical_seeds_give_identical_steps() {
    let (ds, pairs) = data();
    let b = batch(&ds, &pairs[..4]);
    let run = || {
        let mut t = Trainer::new(config(), 3, &Device::Cpu).unwrap();
        let reports = (0..2).map(|_| t.train_step(&b).unwrap()).collect::<Vec<_>>();
        (reports, t.generator.params().snapshot().unwrap(), t.discriminator.params().snapshot().unwrap())
    };
    let (ra, ga, da) = run();
    let (rb, gb, db) = run();
    assert_eq!(ra, rb);
    assert_eq!(ga, gb);
    assert_eq!(da, db);
    assert!(ra.iter().all(|r| r.total_d.is_some() && r.total_g.is_some()));
}

#[test]
fn each_step_only_moves_its_own_network() {
    let (ds, pairs) = data();
    let b = batch(&ds, &pairs[..4]);
    let mut t = Trainer::new(config(), 3, &Device::Cpu).unwrap();

    let g0 = t.generator.params().snapshot().unwrap();
    let d0 = t.discriminator.params().snapshot().unwrap();
    let fwd = t.forward(&b).unwrap();
    let d_report = t.discriminator_step(&b, &fwd).unwrap();
    assert!(d_report.gan_d.is_some() && d_report.rec.is_none());
    assert_eq!(t.generator.params().snapshot().unwrap(), g0);
    let d1 = t.discriminator.params().snapshot().unwrap();
    assert_ne!(d1, d0);

    t.generator_step(&b, &fwd).unwrap();
    assert_eq!(t.discriminator.params().snapshot().unwrap(), d1);
    assert_ne!(t.generator.params().snapshot().unwrap(), g0);
}

#[test]
fn zero_generator_weights_freeze_the_generator() {
    let (ds, pairs) = data();
    let b = batch(&ds, &pairs[..4]);
    let weights = LossWeights {
        g: 0.0,
        rec: 0.0,
        idt: 0.0,
        cyc: 0.0,
        cls: 0.0,
        tv: 0.0,
        ..LossWeights::default()
    };
    let mut t = Trainer::new(TrainConfig { weights, ..config() }, 3, &Device::Cpu).unwrap();
    let g0 = t.generator.params().snapshot().unwrap();
    let report = t.train_step(&b).unwrap();
    assert_eq!(t.generator.params().snapshot().unwrap(), g0);
    assert_eq!(report.total_g, Some(0.0));
}

#[test]
fn only_adversarial_weight_leaves_gan_term() {
    let (ds, pairs) = data();
    let b = batch(&ds, &pairs[..4]);
    let weights = LossWeights {
        rec: 0.0,
        idt: 0.0,
        cyc: 0.0,
        cls: 0.0,
        tv: 0.0,
        ..LossWeights::default()
    };
    let mut t = Trainer::new(TrainConfig { weights, ..config() }, 3, &Device::Cpu).unwrap();
    let r = t.train_step(&b).unwrap();
    assert_eq!(r.total_g.unwrap(), weights.g * r.gan_g.unwrap());
}

#[test]
fn generator_forward_count_per_step() {
    let (ds, pairs) = data();
    let b = batch(&ds, &pairs[..2]);
    for (rolling, expected) in [(false, 2), (true, 3)] {
        let mut t = Trainer::new(TrainConfig { rolling, ..config() }, 3, &Device::Cpu).unwrap();
        t.generator.reset_forward_passes();
        t.train_step(&b).unwrap();
        assert_eq!(t.generator.forward_passes(), expected, "rolling = {rolling}");
    }
}

#[test]
fn wgan_gp_steps_run_and_update_both_networks() {
    let (ds, pairs) = data();
    let b = batch(&ds, &pairs[..2]);
    let cfg = TrainConfig {
        adversarial: deltagan::trainer::Adversarial::WganGp,
        ..config()
    };
    let mut t = Trainer::new(cfg, 3, &Device::Cpu).unwrap();
    let d0 = t.discriminator.params().snapshot().unwrap();
    let r = t.train_step(&b).unwrap();
    assert!(r.total_d.unwrap().is_finite());
    assert_ne!(t.discriminator.params().snapshot().unwrap(), d0);
}

fn read_log(path: &std::path::Path) -> Vec<StepLog> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn one_epoch_writes_epoch_and_best_archives() {
    let (ds, pairs) = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 1, decay_epochs: 1, ..config() };
    let options = FitOptions {
        out_dir: dir.path().to_path_buf(),
        resume: None,
        categories: vec!["a".into(), "b".into(), "c".into()],
    };
    let summary = fit(&cfg, &ds, &pairs[..8], &options, &Device::Cpu).unwrap();
    assert_eq!(summary.checkpoints.len(), 2);
    assert!(summary.checkpoints.iter().all(|p| p.is_file()));
    assert_eq!(summary.best_epoch, Some(0));
    // One pair is held out for validation, leaving 7 pairs in 2 batches.
    let log = read_log(&dir.path().join("losses.jsonl"));
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l.epoch == 0 && l.lr == cfg.learning_rate));
    let ck = Checkpoint::load(dir.path().join("best.safetensors")).unwrap();
    assert_eq!(ck.header.epoch, 0);
    assert_eq!(ck.header.categories.len(), 3);
}

#[test]
fn resume_continues_at_the_next_epoch() {
    let (ds, pairs) = data();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        decay_epochs: 2,
        max_steps_per_epoch: Some(1),
        ..config()
    };
    let first = FitOptions {
        out_dir: dir.path().to_path_buf(),
        resume: None,
        categories: vec![],
    };
    let one = fit(&TrainConfig { epochs: 2, ..cfg.clone() }, &ds, &pairs[..4], &first, &Device::Cpu).unwrap();
    assert_eq!(one.epochs_run, vec![0, 1]);

    let resumed_dir = tempfile::tempdir().unwrap();
    let second = FitOptions {
        out_dir: resumed_dir.path().to_path_buf(),
        resume: Some(dir.path().join("epoch_000.safetensors")),
        categories: vec![],
    };
    let two = fit(&cfg, &ds, &pairs[..4], &second, &Device::Cpu).unwrap();
    assert_eq!(two.epochs_run, vec![1]);
    let log = read_log(&resumed_dir.path().join("losses.jsonl"));
    assert!(log.iter().all(|l| l.epoch == 1 && l.lr == cfg.lr_at(1).unwrap()));
    assert_eq!(cfg.lr_at(1).unwrap(), cfg.learning_rate / 2.0);
}

#[test]
fn empty_pair_list_is_rejected() {
    let (ds, _) = data();
    let dir = tempfile::tempdir().unwrap();
    let options = FitOptions {
        out_dir: dir.path().to_path_buf(),
        resume: None,
        categories: vec![],
    };
    assert!(matches!(fit(&config(), &ds, &[], &options, &Device::Cpu), Err(Error::EmptyDataset)));
}
