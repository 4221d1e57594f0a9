use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::FeatureRecord;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Named class splits of the public benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPreset {
    /// 125 classes, 25 drawn as unseen.
    Sketchy,
    /// 125 classes, 21 drawn as unseen.
    SketchySs,
    /// 250 classes, 30 unseen drawn among classes with more than 400 images.
    TuBerlin,
}

impl SplitPreset {
    pub const ALL: [SplitPreset; 3] = [SplitPreset::Sketchy, SplitPreset::SketchySs, SplitPreset::TuBerlin];

    pub fn name(self) -> &'static str {
        match self {
            SplitPreset::Sketchy => "sketchy",
            SplitPreset::SketchySs => "sketchy-ss",
            SplitPreset::TuBerlin => "tuberlin",
        }
    }

    pub fn total_classes(self) -> usize {
        match self {
            SplitPreset::Sketchy | SplitPreset::SketchySs => 125,
            SplitPreset::TuBerlin => 250,
        }
    }

    pub fn unseen_classes(self) -> usize {
        match self {
            SplitPreset::Sketchy => 25,
            SplitPreset::SketchySs => 21,
            SplitPreset::TuBerlin => 30,
        }
    }

    /// Minimum number of images (exclusive) an unseen class must have.
    pub fn min_images_exclusive(self) -> Option<usize> {
        match self {
            SplitPreset::TuBerlin => Some(400),
            _ => None,
        }
    }
}

impl fmt::Display for SplitPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SplitPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split preset '{s}'")))
    }
}

/// How unseen classes are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitRule {
    /// Round(fraction × classes) drawn at random.
    Fraction(f64),
    /// Exactly this many drawn at random.
    Count(usize),
    /// These classes, no draw.
    Explicit(Vec<u32>),
    Preset(SplitPreset),
}

/// Class-disjoint train/test partition of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub seen: BTreeSet<u32>,
    pub unseen: BTreeSet<u32>,
    pub train_images: Vec<FeatureRecord>,
    pub train_sketches: Vec<FeatureRecord>,
    pub test_images: Vec<FeatureRecord>,
    pub test_sketches: Vec<FeatureRecord>,
}

impl DatasetSplit {
    /// Images retrieved against at test time.
    pub fn database(&self, include_seen: bool) -> Vec<FeatureRecord> {
        let mut db = self.test_images.clone();
        if include_seen {
            db.extend(self.train_images.iter().cloned());
        }
        db
    }
}

fn class_counts(records: &[FeatureRecord]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.label).or_insert(0) += 1;
    }
    m
}

pub fn make_zero_shot_split(
    images: &[FeatureRecord],
    sketches: &[FeatureRecord],
    rule: &SplitRule,
    seed: u64,
) -> Result<DatasetSplit> {
    let image_counts = class_counts(images);
    let classes: BTreeSet<u32> = image_counts
        .keys()
        .chain(class_counts(sketches).keys())
        .copied()
        .collect();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "a zero-shot split needs at least 2 classes, found {}",
            classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |pool: Vec<u32>, k: usize, rng: &mut ChaCha8Rng| -> Result<BTreeSet<u32>> {
        if k > pool.len() {
            return Err(Error::Config(format!(
                "cannot draw {k} unseen classes from {} candidates",
                pool.len()
            )));
        }
        let mut pool = pool;
        pool.shuffle(rng);
        Ok(pool.into_iter().take(k).collect())
    };
    let all: Vec<u32> = classes.iter().copied().collect();
    let unseen: BTreeSet<u32> = match rule {
        SplitRule::Fraction(f) => {
            if !(f.is_finite() && *f > 0.0 && *f < 1.0) {
                return Err(Error::Config(format!("unseen fraction must be in (0, 1), got {f}")));
            }
            let k = (f * all.len() as f64).round() as usize;
            draw(all, k, &mut rng)?
        }
        SplitRule::Count(k) => draw(all, *k, &mut rng)?,
        SplitRule::Explicit(list) => {
            if let Some(c) = list.iter().find(|c| !classes.contains(c)) {
                return Err(Error::Config(format!("unseen class {c} does not occur in the data")));
            }
            list.iter().copied().collect()
        }
        SplitRule::Preset(p) => {
            if classes.len() != p.total_classes() {
                return Err(Error::Config(format!(
                    "preset {p} expects {} classes, data has {}",
                    p.total_classes(),
                    classes.len()
                )));
            }
            let pool: Vec<u32> = match p.min_images_exclusive() {
                Some(min) => all
                    .into_iter()
                    .filter(|c| image_counts.get(c).copied().unwrap_or(0) > min)
                    .collect(),
                None => all,
            };
            draw(pool, p.unseen_classes(), &mut rng)?
        }
    };
    if unseen.is_empty() {
        return Err(Error::Config("the unseen class set is empty".into()));
    }
    if unseen.len() >= classes.len() {
        return Err(Error::Config("the unseen class set covers every class".into()));
    }
    let seen: BTreeSet<u32> = classes.difference(&unseen).copied().collect();
    let part = |recs: &[FeatureRecord], want: &BTreeSet<u32>| -> Vec<FeatureRecord> {
        recs.iter().filter(|r| want.contains(&r.label)).cloned().collect()
    };
    Ok(DatasetSplit {
        train_images: part(images, &seen),
        train_sketches: part(sketches, &seen),
        test_images: part(images, &unseen),
        test_sketches: part(sketches, &unseen),
        seen,
        unseen,
    })
}

/// Paired sketch and image features of the seen classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    /// `[n, attr_dim]`
    pub sketches: Tensor,
    /// `[n, feature_dim]`
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub pairs_per_class: usize,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of both matrices.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let pick = |t: &Tensor| {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
            Tensor::from_rows(&rows, t.cols()).expect("rows share a width")
        };
        (pick(&self.sketches), pick(&self.images))
    }
}

/// For each seen class in ascending order, `pairs_per_class` independent
/// uniform (image, sketch) draws with replacement.
pub fn build_pairs(split: &DatasetSplit, pairs_per_class: usize, seed: u64) -> Result<PairSet> {
    let mut by_class: BTreeMap<u32, (Vec<&FeatureRecord>, Vec<&FeatureRecord>)> =
        split.seen.iter().map(|&c| (c, (Vec::new(), Vec::new()))).collect();
    for r in &split.train_images {
        if let Some(e) = by_class.get_mut(&r.label) {
            e.0.push(r);
        }
    }
    for r in &split.train_sketches {
        if let Some(e) = by_class.get_mut(&r.label) {
            e.1.push(r);
        }
    }
    for (c, (imgs, skts)) in &by_class {
        if imgs.is_empty() || skts.is_empty() {
            let missing = if imgs.is_empty() { "image" } else { "sketch" };
            return Err(Error::Data(format!("seen class {c} has no {missing} records")));
        }
    }
    let fdim = split.train_images.first().map_or(0, |r| r.vector.len());
    let adim = split.train_sketches.first().map_or(0, |r| r.vector.len());
    let n = by_class.len() * pairs_per_class;
    let mut xs = Vec::with_capacity(n * fdim);
    let mut as_ = Vec::with_capacity(n * adim);
    let mut labels = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (&c, (imgs, skts)) in &by_class {
        for _ in 0..pairs_per_class {
            let i = rng.random_range(0..imgs.len());
            let s = rng.random_range(0..skts.len());
            xs.extend_from_slice(&imgs[i].vector);
            as_.extend_from_slice(&skts[s].vector);
            labels.push(c);
        }
    }
    Ok(PairSet {
        sketches: Tensor::new(vec![n, adim], as_)?,
        images: Tensor::new(vec![n, fdim], xs)?,
        labels,
        pairs_per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::Modality;

    fn records(classes: u32, per: usize, modality: Modality) -> Vec<FeatureRecord> {
        (0..classes)
            .flat_map(|c| {
                (0..per).map(move |i| FeatureRecord {
                    label: c,
                    modality,
                    vector: vec![c as f64, i as f64],
                })
            })
            .collect()
    }

    #[test]
    fn five_classes_two_unseen() {
        let im = records(5, 3, Modality::Image);
        let sk = records(5, 2, Modality::Sketch);
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Count(2), 1).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (3, 2));
        assert!(s.seen.is_disjoint(&s.unseen));
        assert!(s.train_images.iter().all(|r| s.seen.contains(&r.label)));
        assert!(s.test_sketches.iter().all(|r| s.unseen.contains(&r.label)));
        assert_eq!(s.train_images.len() + s.test_images.len(), 15);
        assert_eq!(s, make_zero_shot_split(&im, &sk, &SplitRule::Count(2), 1).unwrap());
    }

    #[test]
    fn degenerate_rules_rejected() {
        let im = records(4, 1, Modality::Image);
        let sk = records(4, 1, Modality::Sketch);
        assert!(make_zero_shot_split(&im, &sk, &SplitRule::Count(0), 0).is_err());
        assert!(make_zero_shot_split(&im, &sk, &SplitRule::Count(4), 0).is_err());
        assert!(make_zero_shot_split(&im, &sk, &SplitRule::Explicit(vec![9]), 0).is_err());
        assert!(make_zero_shot_split(&im[..1], &sk[..1], &SplitRule::Count(1), 0).is_err());
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Explicit(vec![0, 3]), 0).unwrap();
        assert_eq!(s.unseen, [0, 3].into_iter().collect());
    }

    #[test]
    fn presets_have_paper_proportions() {
        let im = records(125, 1, Modality::Image);
        let sk = records(125, 1, Modality::Sketch);
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Preset(SplitPreset::Sketchy), 3).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (100, 25));
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Preset(SplitPreset::SketchySs), 3).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (104, 21));
        assert!(make_zero_shot_split(&im, &sk, &SplitRule::Preset(SplitPreset::TuBerlin), 3).is_err());
    }

    #[test]
    fn tuberlin_filters_before_drawing() {
        let mut im = records(250, 1, Modality::Image);
        let big: Vec<u32> = (0..40).map(|i| i * 6).collect();
        for &c in &big {
            im.extend((0..401).map(|_| FeatureRecord {
                label: c,
                modality: Modality::Image,
                vector: vec![0.0, 0.0],
            }));
        }
        let sk = records(250, 1, Modality::Sketch);
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Preset(SplitPreset::TuBerlin), 5).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (220, 30));
        assert!(s.unseen.iter().all(|c| big.contains(c)));
    }

    #[test]
    fn pairing_counts_and_labels() {
        let im = records(5, 4, Modality::Image);
        let sk = records(5, 3, Modality::Sketch);
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Count(2), 0).unwrap();
        let p = build_pairs(&s, 1000, 9).unwrap();
        assert_eq!(p.len(), 3000);
        for i in 0..p.len() {
            assert_eq!(p.images.row(i)[0], p.labels[i] as f64);
            assert_eq!(p.sketches.row(i)[0], p.labels[i] as f64);
        }
        assert_eq!(p, build_pairs(&s, 1000, 9).unwrap());
    }

    #[test]
    fn single_record_pairing_is_forced() {
        let im = records(3, 1, Modality::Image);
        let sk = records(3, 1, Modality::Sketch);
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Explicit(vec![2]), 0).unwrap();
        let p = build_pairs(&s, 1, 0).unwrap();
        assert_eq!(p.labels, vec![0, 1]);
        assert_eq!(p.images.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn missing_modality_names_class() {
        let im = records(3, 1, Modality::Image);
        let sk: Vec<_> = records(3, 1, Modality::Sketch).into_iter().filter(|r| r.label != 1).collect();
        let s = make_zero_shot_split(&im, &sk, &SplitRule::Explicit(vec![2]), 0).unwrap();
        let err = build_pairs(&s, 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }
}
