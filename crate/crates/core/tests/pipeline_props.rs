use std::collections::BTreeSet;

use deltagan::condmap::{AnnotationRecord, ShapeAnnotation, TriangleJson};
use deltagan::datapipe::synthetic::{SyntheticSet, SyntheticSpec};
use deltagan::datapipe::{
    augment, build_pairs, split, Augmentation, Dataset, ImageBuffer, LoadOptions, Pairing, SplitMode, SplitSpec,
};
use deltagan::metrics::{fid, psnr_from_mse, weighted_f1};
use deltagan::trainer::{lr_at, schedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn records(groups: &[(usize, usize, usize)]) -> Vec<AnnotationRecord> {
    let mut out = Vec::new();
    for &(subject, scene, size) in groups {
        for i in 0..size {
            out.push(AnnotationRecord {
                image: format!("images/{subject}_{scene}_{i}_{}.png", out.len()),
                category: i % 3,
                subject: format!("s{subject}"),
                scene: format!("k{scene}"),
                shape: ShapeAnnotation::Triangle(TriangleJson { vertices: [[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]], base: 0 }),
            });
        }
    }
    out
}

/// 100 records in 20 groups of 5.
fn hundred() -> Vec<AnnotationRecord> {
    let groups: Vec<_> = (0..20).map(|g| (g / 4, g % 4, 5)).collect();
    records(&groups)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn challenging_split_never_shares_a_target(seed in any::<u64>(), ratio in 0.05f64..0.6) {
        let recs = hundred();
        let pairs = build_pairs(&recs, Pairing::Ordered);
        let spec = SplitSpec { mode: SplitMode::Challenging, seed, test_ratio: ratio };
        let (train, test) = split(&pairs, &spec).unwrap();
        prop_assert_eq!(train.len() + test.len(), pairs.len());
        let train_targets: BTreeSet<usize> = train.iter().map(|p| p.target).collect();
        for p in &test {
            prop_assert!(!train_targets.contains(&p.target), "target {} on both sides", p.target);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pair_counts_and_determinism(sizes in prop::collection::vec(1usize..7, 1..6)) {
        let groups: Vec<_> = sizes.iter().enumerate().map(|(g, &k)| (g % 2, g, k)).collect();
        let recs = records(&groups);
        let ordered = build_pairs(&recs, Pairing::Ordered);
        let unordered = build_pairs(&recs, Pairing::Unordered);
        let expected: usize = sizes.iter().map(|k| k * (k - 1)).sum();
        prop_assert_eq!(ordered.len(), expected);
        prop_assert_eq!(unordered.len(), expected / 2);
        prop_assert_eq!(&ordered, &build_pairs(&recs, Pairing::Ordered));
        for p in &ordered {
            prop_assert!(p.source != p.target);
            prop_assert_eq!((&recs[p.source].subject, &recs[p.source].scene), (&recs[p.target].subject, &recs[p.target].scene));
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity(capacity in 0usize..8, pushes in 0usize..60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ImageBuffer::new(capacity);
        for i in 0..pushes {
            buf.push_sample(i, &mut rng);
            prop_assert!(buf.len() <= capacity);
        }
        prop_assert_eq!(buf.len(), pushes.min(capacity));
    }

    #[test]
    fn lr_is_non_increasing(base in 1e-6f64..1e-2, total in 1usize..40, decay_frac in 0.0f64..=1.0) {
        let decay = ((total as f64) * decay_frac).round() as usize;
        let mut prev = f64::INFINITY;
        for e in 0..total {
            let lr = lr_at(base, total, decay, e).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        prop_assert!(lr_at(base, total, decay, total).is_err());
        if decay > 0 {
            prop_assert_eq!(schedule(base, total, decay, total), 0.0);
        }
    }

    #[test]
    fn psnr_strictly_decreasing_in_mse(a in 1e-9f64..1e6, b in 1e-9f64..1e6) {
        prop_assume!(a != b);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(psnr_from_mse(lo) > psnr_from_mse(hi));
    }

    #[test]
    fn f1_bounded_and_relabeling_invariant(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40),
        perm in Just((0usize..5).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let f = weighted_f1(&pred, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        let g = weighted_f1(&relabel(&pred), &relabel(&truth)).unwrap();
        prop_assert!((f - g).abs() < 1e-12);
    }

    #[test]
    fn fid_symmetric_and_zero_on_self(
        x in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..12),
        y in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..12),
    ) {
        let xy = fid(&x, &y).unwrap();
        let yx = fid(&y, &x).unwrap();
        prop_assert!((xy - yx).abs() <= 1e-8 * (1.0 + xy.abs()), "{xy} vs {yx}");
        prop_assert!(fid(&x, &x).unwrap() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn augmentation_keeps_pairing(seed in 0u64..500, flip: bool, swap: bool, pick in 0usize..1000) {
        let set = SyntheticSet::generate(&SyntheticSpec {
            subjects: 2, scenes_per_subject: 1, images_per_scene: 3, n_c: 3, height: 8, width: 8, seed,
        }).unwrap();
        let data = Dataset::from_memory(set.records.clone(), set.images, LoadOptions::new(8, 8)).unwrap();
        let pairs = build_pairs(&set.records, Pairing::Ordered);
        let p = pairs[pick % pairs.len()];
        let sample = data.sample(p);
        let out = augment(&sample, Augmentation { flip, swap });
        prop_assert_eq!(&out.subject, &sample.subject);
        prop_assert_eq!(&out.scene, &sample.scene);
        prop_assert_eq!(&out.subject, &set.records[p.source].subject);
        let expected_target = if swap { sample.source_category } else { sample.target_category };
        prop_assert_eq!(out.target_category, expected_target);
        // Flipping the image and its map together matches flipping the raster input.
        if flip && !swap {
            let opts = LoadOptions::new(8, 8);
            let from_annotation = set.records[p.target].shape.flip_x(8).rasterize((8, 8), 8, 8, opts.stroke).unwrap();
            prop_assert_eq!(&out.target_map, &from_annotation);
        }
        prop_assert_eq!(augment(&augment(&sample, Augmentation { flip: true, swap: false }), Augmentation { flip: true, swap: false }), sample.clone());
        prop_assert_eq!(augment(&augment(&sample, Augmentation { flip: false, swap: true }), Augmentation { flip: false, swap: true }), sample);
    }
}
