use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Gate bias for model flows. Each fresh step scales by about 0.993, so the
/// chain starts near the identity and the base posterior can sit at the prior.
pub const MODEL_GATE_BIAS: f64 = 5.0;

/// Model family used in training and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Flow-refined VAE with regressor feedback.
    FeedbackVae,
    /// Zero-dimensional latent: a deterministic sketch-conditioned autoencoder.
    FeedbackAuto,
    /// VAE without flow steps.
    NoIaf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::FeedbackVae, Variant::NoIaf, Variant::FeedbackAuto];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FeedbackVae => "feedback-vae",
            Variant::FeedbackAuto => "feedback-auto",
            Variant::NoIaf => "no-iaf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected feedback-vae, feedback-auto or no-iaf)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub latent_dim: usize,
    pub flow_steps: usize,
    pub context_dim: usize,
    pub prior_scale: f64,
    /// Read `prior_scale` as a variance instead of a standard deviation.
    pub prior_scale_is_variance: bool,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub regressor_widths: Vec<usize>,
    pub made_widths: Vec<usize>,
    pub gate_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(32, 32)
    }
}

impl ModelConfig {
    /// Desk-scale network for the given feature widths.
    pub fn desk(feature_dim: usize, attr_dim: usize) -> Self {
        ModelConfig {
            variant: Variant::FeedbackVae,
            feature_dim,
            attr_dim,
            latent_dim: 8,
            flow_steps: 3,
            context_dim: 16,
            prior_scale: 0.005,
            prior_scale_is_variance: false,
            encoder_widths: vec![128, 128],
            decoder_widths: vec![128, 128],
            regressor_widths: vec![128],
            made_widths: vec![32, 32],
            gate_bias: MODEL_GATE_BIAS,
        }
    }

    /// Full-size widths: 2048-d features, 4096-wide encoder and regressor,
    /// five 6144-wide residual generator blocks, three flow steps.
    pub fn paper_scale() -> Self {
        ModelConfig {
            variant: Variant::FeedbackVae,
            feature_dim: 2048,
            attr_dim: 2048,
            latent_dim: 1024,
            flow_steps: 3,
            context_dim: 2048,
            prior_scale: 0.005,
            prior_scale_is_variance: false,
            encoder_widths: vec![4096, 4096],
            decoder_widths: vec![6144; 5],
            regressor_widths: vec![4096],
            made_widths: vec![4096, 4096],
            gate_bias: MODEL_GATE_BIAS,
        }
    }

    /// Applies the variant's structural constraints.
    pub fn normalized(mut self) -> Self {
        match self.variant {
            Variant::FeedbackAuto => {
                self.latent_dim = 0;
                self.flow_steps = 0;
                self.context_dim = 0;
            }
            Variant::NoIaf => self.flow_steps = 0,
            Variant::FeedbackVae => {}
        }
        if self.latent_dim == 0 {
            self.context_dim = 0;
        }
        self
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.feature_dim == 0 {
            out.push("feature_dim must be positive".to_string());
        }
        if self.attr_dim == 0 {
            out.push("attr_dim must be positive".to_string());
        }
        if !(self.prior_scale.is_finite() && self.prior_scale > 0.0) {
            out.push(format!("prior_scale must be > 0, got {}", self.prior_scale));
        }
        if !self.gate_bias.is_finite() {
            out.push("gate_bias must be finite".to_string());
        }
        match self.variant {
            Variant::FeedbackAuto if self.latent_dim != 0 || self.flow_steps != 0 => {
                out.push("feedback-auto requires latent_dim = 0 and flow_steps = 0".to_string())
            }
            Variant::NoIaf if self.flow_steps != 0 => out.push("no-iaf requires flow_steps = 0".to_string()),
            Variant::NoIaf | Variant::FeedbackVae if self.latent_dim == 0 => {
                out.push(format!("{} requires latent_dim > 0", self.variant))
            }
            _ => {}
        }
        for (name, widths) in [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("regressor_widths", &self.regressor_widths),
            ("made_widths", &self.made_widths),
        ] {
            if widths.contains(&0) {
                out.push(format!("{name} contains a zero width"));
            }
        }
        if self.flow_steps > 0 && self.latent_dim > 1 {
            if let Some(&w) = self.made_widths.iter().min() {
                if w + 1 < self.latent_dim {
                    out.push(format!(
                        "made_widths must be >= latent_dim - 1 = {} to reach every degree",
                        self.latent_dim - 1
                    ));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Prior standard deviation.
    pub fn prior_std(&self) -> f64 {
        if self.prior_scale_is_variance {
            self.prior_scale.sqrt()
        } else {
            self.prior_scale
        }
    }

    /// Deterministic `key = value` rendering used for fingerprints.
    pub fn canonical_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = [
            format!("attr_dim = {}", self.attr_dim),
            format!("context_dim = {}", self.context_dim),
            format!("decoder_widths = {}", list(&self.decoder_widths)),
            format!("encoder_widths = {}", list(&self.encoder_widths)),
            format!("feature_dim = {}", self.feature_dim),
            format!("flow_steps = {}", self.flow_steps),
            format!("gate_bias = {:?}", self.gate_bias),
            format!("latent_dim = {}", self.latent_dim),
            format!("made_widths = {}", list(&self.made_widths)),
            format!("prior_scale = {:?}", self.prior_scale),
            format!("prior_scale_is_variance = {}", self.prior_scale_is_variance),
            format!("regressor_widths = {}", list(&self.regressor_widths)),
            format!("variant = {}", self.variant),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Hex SHA-256 of [`ModelConfig::canonical_text`].
    pub fn fingerprint(&self) -> String {
        fingerprint_text(&self.canonical_text())
    }
}

pub fn fingerprint_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_force_dimensions() {
        let auto = ModelConfig {
            variant: Variant::FeedbackAuto,
            ..ModelConfig::default()
        }
        .normalized();
        assert_eq!((auto.latent_dim, auto.flow_steps, auto.context_dim), (0, 0, 0));
        assert!(auto.validate().is_ok());

        let no_iaf = ModelConfig {
            variant: Variant::NoIaf,
            ..ModelConfig::default()
        }
        .normalized();
        assert_eq!(no_iaf.flow_steps, 0);
        assert!(no_iaf.latent_dim > 0);
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ModelConfig {
            prior_scale: 0.0,
            feature_dim: 0,
            encoder_widths: vec![0],
            ..ModelConfig::default()
        };
        let p = cfg.problems();
        assert_eq!(p.len(), 3, "{p:?}");
    }

    #[test]
    fn prior_scale_reading() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.prior_std(), 0.005);
        cfg.prior_scale_is_variance = true;
        assert!((cfg.prior_std() - 0.005f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.latent_dim = 4;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("vae".parse::<Variant>().is_err());
    }
}
