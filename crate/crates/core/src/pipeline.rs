//! End-to-end runs: split, scale, pair, train and evaluate.

use serde::{Deserialize, Serialize};

use crate::data::{build_pairs, make_zero_shot_split, standardize, DatasetSplit, FeatureRecord, PairSet, Scaling, SplitRule};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, Variant};
use crate::retrieval::{center_records, evaluate, mean_vector, MetricsReport, QueryResult, RetrievalConfig, Unscaled};
use crate::trainer::{EpochLog, TrainConfig, Trainer};

/// Scaled split plus training pairs.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Split in raw feature coordinates.
    pub raw: DatasetSplit,
    /// Same split after scaling.
    pub split: DatasetSplit,
    pub scaling: Scaling,
    pub pairs: PairSet,
}

impl Prepared {
    pub fn feature_dim(&self) -> usize {
        self.scaling.image.dim()
    }

    pub fn attr_dim(&self) -> usize {
        self.scaling.sketch.dim()
    }

    /// Model config with widths taken from the data.
    pub fn fit_dims(&self, mut cfg: ModelConfig) -> ModelConfig {
        cfg.feature_dim = self.feature_dim();
        cfg.attr_dim = self.attr_dim();
        cfg
    }
}

pub fn prepare(
    images: &[FeatureRecord],
    sketches: &[FeatureRecord],
    rule: &SplitRule,
    split_seed: u64,
    pairs_per_class: usize,
    pair_seed: u64,
) -> Result<Prepared> {
    let raw = make_zero_shot_split(images, sketches, rule, split_seed)?;
    let (split, scaling) = standardize(&raw)?;
    let pairs = build_pairs(&split, pairs_per_class, pair_seed)?;
    Ok(Prepared {
        raw,
        split,
        scaling,
        pairs,
    })
}

/// Trains from scratch on prepared data.
pub fn train(prepared: &Prepared, model: ModelConfig, train: TrainConfig, model_seed: u64) -> Result<(Trainer, Vec<EpochLog>)> {
    let cfg = prepared.fit_dims(model);
    let bundle = ModelBundle::new(cfg, model_seed)?;
    let mut trainer = Trainer::new(bundle, train)?;
    trainer.scaling = Some(prepared.scaling.clone());
    let log = trainer.fit(&prepared.pairs)?;
    Ok((trainer, log))
}

/// Unseen-class sketches against the raw test database. Queries are scaled
/// for the model, candidates are mapped back to raw coordinates, and both
/// sides are centered on the mean seen-class training image before cosine
/// scoring.
pub fn evaluate_split(
    bundle: &ModelBundle,
    raw: &DatasetSplit,
    scaling: &Scaling,
    cfg: &RetrievalConfig,
    keep_rankings: bool,
) -> Result<(MetricsReport, Vec<QueryResult>)> {
    let queries = scaling.sketch.apply_all(&raw.test_sketches)?;
    let center = mean_vector(&raw.train_images);
    let db = center_records(&raw.database(cfg.include_seen), &center);
    let generator = Unscaled {
        inner: bundle,
        image: &scaling.image,
        center: &center,
    };
    let (mut report, rankings) = evaluate(&generator, &queries, &db, cfg, keep_rankings)?;
    report.fingerprint = Some(bundle.config.fingerprint());
    Ok((report, rankings))
}

/// [`evaluate_split`] on prepared data, metrics only.
pub fn evaluate_prepared(bundle: &ModelBundle, prepared: &Prepared, cfg: &RetrievalConfig) -> Result<MetricsReport> {
    Ok(evaluate_split(bundle, &prepared.raw, &prepared.scaling, cfg, false)?.0)
}

/// Result of one variant in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub map_at_all: f64,
    pub precision_at_k: std::collections::BTreeMap<usize, f64>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median metrics of one variant over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_map_at_all: f64,
    pub median_precision_at_k: std::collections::BTreeMap<usize, f64>,
    pub runs: Vec<VariantRun>,
}

impl VariantSummary {
    pub fn from_runs(variant: Variant, runs: Vec<VariantRun>) -> Self {
        let ks: Vec<usize> = runs.first().map(|r| r.precision_at_k.keys().copied().collect()).unwrap_or_default();
        VariantSummary {
            variant,
            median_map_at_all: median(runs.iter().map(|r| r.map_at_all).collect()),
            median_precision_at_k: ks
                .into_iter()
                .map(|k| (k, median(runs.iter().map(|r| r.precision_at_k[&k]).collect())))
                .collect(),
            runs,
        }
    }
}

/// Variants compared on identical seeds, with relative mAP changes of the
/// first variant over each other one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
    /// `(reference, other, (ref - other) / other)` on median mAP@all.
    pub relative_map_gain: Vec<(Variant, Variant, f64)>,
}

impl Comparison {
    pub fn new(preset: &str, seeds: Vec<u64>, variants: Vec<VariantSummary>) -> Result<Self> {
        let Some(reference) = variants.first() else {
            return Err(Error::Config("a comparison needs at least one variant".into()));
        };
        let relative_map_gain = variants[1..]
            .iter()
            .map(|o| {
                (
                    reference.variant,
                    o.variant,
                    (reference.median_map_at_all - o.median_map_at_all) / o.median_map_at_all,
                )
            })
            .collect();
        Ok(Comparison {
            preset: preset.to_string(),
            seeds,
            variants,
            relative_map_gain,
        })
    }
}
