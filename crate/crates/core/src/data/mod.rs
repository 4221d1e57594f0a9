//! Feature files, zero-shot splits, pairing, scaling and synthetic data.

mod io;
mod scale;
mod split;
mod synth;

pub use io::{
    decode_features, encode_features, load_any, load_csv, load_features, parse_csv, save_features, Dataset,
    FeatureRecord, Manifest, Modality, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use scale::{standardize, Scaling, ScalingParams};
pub use split::{build_pairs, make_zero_shot_split, DatasetSplit, PairSet, SplitPreset, SplitRule};
pub use synth::{synth_generate, SyntheticData, SyntheticSpec};
