//! Pair construction, train/test splitting, augmentation and the history
//! buffer of generated images.

mod dataset;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condmap::{AnnotationRecord, ConditionalMap};
use crate::error::{Error, Result};
use crate::imaging::ColorImage;
use crate::nn::seeded_rng;

pub use dataset::{Batch, Dataset, DatasetIndex, LoadOptions};

/// A source/target pair, as indices into a [`DatasetIndex`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SamplePair {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Every ordered `(A, B)` with `A != B`.
    Ordered,
    /// One pair per unordered `{A, B}`; direction comes from augmentation.
    Unordered,
}

/// Pairs within each (subject, scene) group, groups in order of first
/// appearance and members in index order.
pub fn build_pairs(records: &[AnnotationRecord], pairing: Pairing) -> Vec<SamplePair> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let g = *slot.entry((&r.subject, &r.scene)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut pairs = Vec::new();
    for group in &groups {
        for (ai, &a) in group.iter().enumerate() {
            for (bi, &b) in group.iter().enumerate() {
                let keep = match pairing {
                    Pairing::Ordered => ai != bi,
                    Pairing::Unordered => ai < bi,
                };
                if keep {
                    pairs.push(SamplePair { source: a, target: b });
                }
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Random split at the pair level.
    Normal,
    /// Split by target image: all pairs into a given target land on one side.
    Challenging,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(SplitMode::Normal),
            "challenging" => Ok(SplitMode::Challenging),
            other => Err(Error::InvalidConfig(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    /// Fraction of pairs (normal) or target images (challenging) held out.
    pub test_ratio: f64,
}

impl SplitSpec {
    /// Challenging splits fix the direction of every pair, so they are built
    /// from ordered pairs and training must not swap directions.
    pub fn pairing(&self) -> Pairing {
        match self.mode {
            SplitMode::Normal => Pairing::Unordered,
            SplitMode::Challenging => Pairing::Ordered,
        }
    }
}

/// `(train, test)`; both sides keep the input order.
pub fn split(pairs: &[SamplePair], spec: &SplitSpec) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&spec.test_ratio) {
        return Err(Error::InvalidConfig(format!("test ratio {} outside [0, 1]", spec.test_ratio)));
    }
    let mut rng = seeded_rng(spec.seed);
    let held_out: BTreeSet<usize> = match spec.mode {
        SplitMode::Normal => {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
            let n_test = (spec.test_ratio * pairs.len() as f64).round() as usize;
            order.into_iter().take(n_test).collect()
        }
        SplitMode::Challenging => {
            let mut targets: Vec<usize> = Vec::new();
            let mut seen = BTreeSet::new();
            for p in pairs {
                if seen.insert(p.target) {
                    targets.push(p.target);
                }
            }
            targets.shuffle(&mut rng);
            let n_test = (spec.test_ratio * targets.len() as f64).round() as usize;
            let test_targets: BTreeSet<usize> = targets.into_iter().take(n_test).collect();
            (0..pairs.len())
                .filter(|&i| test_targets.contains(&pairs[i].target))
                .collect()
        }
    };
    let mut train = Vec::with_capacity(pairs.len() - held_out.len());
    let mut test = Vec::with_capacity(held_out.len());
    for (i, p) in pairs.iter().enumerate() {
        if held_out.contains(&i) {
            test.push(*p);
        } else {
            train.push(*p);
        }
    }
    Ok((train, test))
}

/// On-disk split: pair ids are `"<source image>-><target image>"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub mode: SplitMode,
    pub seed: u64,
    pub test_ratio: f64,
    pub pairing: Pairing,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub fn pair_id(records: &[AnnotationRecord], p: SamplePair) -> String {
    format!("{}->{}", records[p.source].image, records[p.target].image)
}

impl SplitFile {
    pub fn build(records: &[AnnotationRecord], spec: &SplitSpec) -> Result<Self> {
        let pairing = spec.pairing();
        let (train, test) = split(&build_pairs(records, pairing), spec)?;
        let ids = |v: &[SamplePair]| v.iter().map(|&p| pair_id(records, p)).collect();
        Ok(Self {
            mode: spec.mode,
            seed: spec.seed,
            test_ratio: spec.test_ratio,
            pairing,
            train: ids(&train),
            test: ids(&test),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Resolves pair ids back to index positions.
    pub fn resolve(&self, records: &[AnnotationRecord]) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        let by_image: BTreeMap<&str, usize> =
            records.iter().enumerate().map(|(i, r)| (r.image.as_str(), i)).collect();
        let lookup = |ids: &[String]| {
            ids.iter()
                .map(|id| {
                    let (a, b) = id
                        .split_once("->")
                        .ok_or_else(|| Error::InvalidConfig(format!("malformed pair id `{id}`")))?;
                    let find = |name: &str| {
                        by_image
                            .get(name)
                            .copied()
                            .ok_or_else(|| Error::MissingAnnotation(name.to_string()))
                    };
                    Ok(SamplePair { source: find(a)?, target: find(b)? })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok((lookup(&self.train)?, lookup(&self.test)?))
    }
}

/// One decoded training example at the working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub source: ColorImage,
    pub source_map: ConditionalMap,
    pub source_category: usize,
    pub target: ColorImage,
    pub target_map: ConditionalMap,
    pub target_category: usize,
    pub subject: String,
    pub scene: String,
}

impl PairSample {
    /// Mirrors both images and both maps.
    pub fn flipped(&self) -> Self {
        Self {
            source: self.source.flip_x(),
            source_map: self.source_map.flip_x(),
            target: self.target.flip_x(),
            target_map: self.target_map.flip_x(),
            ..self.clone()
        }
    }

    /// Exchanges the roles of source and target.
    pub fn swapped(&self) -> Self {
        Self {
            source: self.target.clone(),
            source_map: self.target_map.clone(),
            source_category: self.target_category,
            target: self.source.clone(),
            target_map: self.source_map.clone(),
            target_category: self.source_category,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub flip: bool,
    pub swap: bool,
}

impl Augmentation {
    /// Independent coin flips; `allow_swap` is off for challenging splits.
    pub fn sample(rng: &mut impl Rng, allow_swap: bool) -> Self {
        let flip = rng.random_bool(0.5);
        let swap = rng.random_bool(0.5) && allow_swap;
        Self { flip, swap }
    }
}

pub fn augment(sample: &PairSample, aug: Augmentation) -> PairSample {
    let s = if aug.flip { sample.flipped() } else { sample.clone() };
    if aug.swap {
        s.swapped()
    } else {
        s
    }
}

/// Which branch a push into a full buffer takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferDecision {
    /// Return the pushed item, leave the buffer alone.
    PassThrough,
    /// Store the pushed item in this slot and return what was there.
    Swap(usize),
}

/// Pool of past generated samples replayed to the discriminator.
#[derive(Debug, Clone)]
pub struct ImageBuffer<T> {
    capacity: usize,
    items: Vec<T>,
}

impl<T: Clone> ImageBuffer<T> {
    pub const DEFAULT_CAPACITY: usize = 50;

    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores and returns `item` while there is room; once full, returns
    /// `item` or swaps it for a random stored one with equal probability.
    pub fn push_sample(&mut self, item: T, rng: &mut impl Rng) -> T {
        if self.items.len() < self.capacity || self.capacity == 0 {
            return self.push_decided(item, BufferDecision::PassThrough);
        }
        let decision = if rng.random_bool(0.5) {
            BufferDecision::Swap(rng.random_range(0..self.capacity))
        } else {
            BufferDecision::PassThrough
        };
        self.push_decided(item, decision)
    }

    /// Like [`push_sample`](Self::push_sample) with the coin already tossed;
    /// the decision is ignored while the buffer is filling.
    pub fn push_decided(&mut self, item: T, decision: BufferDecision) -> T {
        if self.capacity == 0 {
            return item;
        }
        if self.items.len() < self.capacity {
            self.items.push(item.clone());
            return item;
        }
        match decision {
            BufferDecision::PassThrough => item,
            BufferDecision::Swap(slot) => std::mem::replace(&mut self.items[slot % self.capacity], item),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condmap::{ShapeAnnotation, TriangleJson};
    use rand::SeedableRng;

    fn record(image: &str, subject: &str, scene: &str) -> AnnotationRecord {
        AnnotationRecord {
            image: image.into(),
            category: 0,
            subject: subject.into(),
            scene: scene.into(),
            shape: ShapeAnnotation::Triangle(TriangleJson {
                vertices: [[1.0, 1.0], [6.0, 1.0], [3.0, 6.0]],
                base: 0,
            }),
        }
    }

    fn index(groups: &[usize]) -> Vec<AnnotationRecord> {
        let mut out = Vec::new();
        for (g, &k) in groups.iter().enumerate() {
            for i in 0..k {
                out.push(record(&format!("g{g}_{i}.png"), &format!("s{g}"), ""));
            }
        }
        out
    }

    #[test]
    fn pair_counts_match_combinatorics() {
        let recs = index(&[1, 2, 5]);
        let ordered = build_pairs(&recs, Pairing::Ordered);
        assert_eq!(ordered.len(), 2 + 5 * 4);
        assert_eq!(build_pairs(&recs, Pairing::Unordered).len(), 1 + 10);
        assert!(ordered.iter().all(|p| p.source != p.target
            && recs[p.source].subject == recs[p.target].subject));
        assert_eq!(build_pairs(&index(&[1]), Pairing::Ordered), vec![]);
    }

    #[test]
    fn scenes_separate_groups() {
        let recs = vec![record("a", "s", "x"), record("b", "s", "y"), record("c", "s", "x")];
        let pairs = build_pairs(&recs, Pairing::Ordered);
        assert_eq!(pairs, vec![SamplePair { source: 0, target: 2 }, SamplePair { source: 2, target: 0 }]);
    }

    #[test]
    fn split_edge_cases() {
        let pairs = build_pairs(&index(&[4]), Pairing::Ordered);
        let spec = SplitSpec { mode: SplitMode::Normal, seed: 1, test_ratio: 0.0 };
        let (train, test) = split(&pairs, &spec).unwrap();
        assert_eq!((train.len(), test.len()), (12, 0));
        assert!(matches!(split(&[], &spec), Err(Error::EmptyDataset)));
        let spec = SplitSpec { test_ratio: 0.25, ..spec };
        let (train, test) = split(&pairs, &spec).unwrap();
        assert_eq!((train.len(), test.len()), (9, 3));
    }

    #[test]
    fn challenging_split_keeps_targets_whole() {
        let recs = index(&[6, 7, 3]);
        let pairs = build_pairs(&recs, Pairing::Ordered);
        for seed in 0..10 {
            let spec = SplitSpec { mode: SplitMode::Challenging, seed, test_ratio: 0.3 };
            let (train, test) = split(&pairs, &spec).unwrap();
            let a: BTreeSet<_> = train.iter().map(|p| p.target).collect();
            assert!(test.iter().all(|p| !a.contains(&p.target)));
            assert_eq!(train.len() + test.len(), pairs.len());
        }
    }

    #[test]
    fn split_file_roundtrip() {
        let recs = index(&[3, 3]);
        let spec = SplitSpec { mode: SplitMode::Challenging, seed: 7, test_ratio: 0.5 };
        let a = SplitFile::build(&recs, &spec).unwrap();
        assert_eq!(a.to_json().unwrap(), SplitFile::build(&recs, &spec).unwrap().to_json().unwrap());
        let (train, test) = a.resolve(&recs).unwrap();
        let (t2, s2) = split(&build_pairs(&recs, Pairing::Ordered), &spec).unwrap();
        assert_eq!((train, test), (t2, s2));
    }

    fn sample() -> PairSample {
        let img = |v: f32| {
            let mut i = ColorImage::filled(4, 4, [v, 0.0, -v]);
            i.set(0, 1, 0, 1.0);
            i
        };
        let map = |x| {
            let mut values = vec![0.0; 16];
            values[x] = 1.0;
            ConditionalMap::from_values(4, 4, values).unwrap()
        };
        PairSample {
            source: img(0.2),
            source_map: map(1),
            source_category: 1,
            target: img(-0.4),
            target_map: map(6),
            target_category: 3,
            subject: "s".into(),
            scene: "k".into(),
        }
    }

    #[test]
    fn augmentations_are_involutions() {
        let s = sample();
        assert_eq!(s.flipped().flipped(), s);
        let sw = augment(&s, Augmentation { flip: false, swap: true });
        assert_eq!((sw.source_category, sw.target_category), (3, 1));
        assert_eq!(sw.source_map, s.target_map);
        assert_eq!(sw.subject, s.subject);
        assert_eq!(augment(&sw, Augmentation { flip: false, swap: true }), s);
        let f = augment(&s, Augmentation { flip: true, swap: false });
        assert_eq!(f.source.get(0, 1, 3), 1.0);
        assert_eq!(f.source_map.get(0, 2), 1.0);
    }

    #[test]
    fn swap_is_never_sampled_when_disallowed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert!((0..200).all(|_| !Augmentation::sample(&mut rng, false).swap));
        let swaps = (0..200).filter(|_| Augmentation::sample(&mut rng, true).swap).count();
        assert!((60..140).contains(&swaps));
    }

    #[test]
    fn buffer_behaviour() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut one = ImageBuffer::new(1);
        assert_eq!(one.push_sample(7, &mut rng), 7);
        assert_eq!(one.push_decided(8, BufferDecision::Swap(0)), 7);
        assert_eq!(one.push_decided(9, BufferDecision::PassThrough), 9);
        let mut buf = ImageBuffer::new(50);
        for i in 0..1000 {
            buf.push_sample(i, &mut rng);
            assert!(buf.len() <= 50);
        }
        assert_eq!(buf.len(), 50);
    }
}
