//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketchgen::autodiff::Tensor;
use sketchgen::model::{ModelBundle, ModelConfig};
use sketchgen::retrieval::Database;
use sketchgen::trainer::{TrainConfig, Trainer};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Desk-size trainer with one batch of random inputs.
pub fn desk_trainer(batch: usize) -> (Trainer, Tensor, Tensor) {
    let bundle = ModelBundle::new(ModelConfig::desk(32, 32), 0).expect("desk config is valid");
    let trainer = Trainer::new(bundle, TrainConfig::default()).expect("default train config is valid");
    let mut r = rng(1);
    let x = Tensor::randn(&[batch, 32], &mut r);
    let a = Tensor::randn(&[batch, 32], &mut r);
    (trainer, x, a)
}

/// Random database of `n` vectors over `classes` labels.
pub fn database(n: usize, dim: usize, classes: u32) -> Database {
    let mut r = rng(2);
    let t = Tensor::randn(&[n, dim], &mut r);
    Database {
        vectors: t.data().chunks(dim).map(<[f64]>::to_vec).collect(),
        labels: (0..n as u32).map(|i| i % classes).collect(),
    }
}
