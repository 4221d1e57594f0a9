//! Encoder with flow-refined posterior, residual conditional generator,
//! regressor, and their ablation variants.

mod bundle;
mod config;
mod prior;

pub use bundle::{ModelBundle, PosteriorParams};
pub use config::{fingerprint_text, ModelConfig, Variant, MODEL_GATE_BIAS};
pub use prior::Prior;
