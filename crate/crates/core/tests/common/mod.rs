#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchgen::autodiff::Tensor;
use sketchgen::data::{synth_generate, PairSet, SplitRule, SyntheticSpec};
use sketchgen::model::{ModelBundle, ModelConfig, Variant};
use sketchgen::nn::ParamStore;
use sketchgen::pipeline::{self, Prepared};
use sketchgen::trainer::{TrainConfig, Trainer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Overwrites every parameter with uniform noise in `(-scale, scale)`.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[rows, cols], rng)
}

/// A few small classes, enough to exercise training end to end.
pub fn small_prepared(seed: u64) -> Prepared {
    let spec = SyntheticSpec {
        n_classes: 6,
        dim: 8,
        images_per_class: 20,
        sketches_per_class: 20,
        seed,
        ..SyntheticSpec::default()
    };
    let data = synth_generate(&spec).unwrap();
    pipeline::prepare(&data.images, &data.sketches, &SplitRule::Count(2), seed, 16, seed).unwrap()
}

pub fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        latent_dim: 3,
        flow_steps: 2,
        context_dim: 2,
        encoder_widths: vec![12],
        decoder_widths: vec![12, 12],
        regressor_widths: vec![10],
        made_widths: vec![6],
        ..ModelConfig::desk(8, 8)
    }
}

pub fn small_trainer(seed: u64, epochs: usize) -> (Trainer, PairSet) {
    let prep = small_prepared(seed);
    let cfg = prep.fit_dims(small_model(Variant::FeedbackVae));
    let bundle = ModelBundle::new(cfg, seed).unwrap();
    let train = TrainConfig {
        epochs,
        batch_size: 8,
        pairs_per_class: 16,
        seed,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(bundle, train).unwrap();
    t.scaling = Some(prep.scaling.clone());
    (t, prep.pairs)
}
