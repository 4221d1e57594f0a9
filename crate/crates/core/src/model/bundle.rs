use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::prior::Prior;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{gaussian_log_density, FlowChain, FlowSample};
use crate::nn::{Activation, Bound, Linear, Mlp, ParamGroup, ParamId, ParamStore, ResidualBlock};

/// Initial posterior `N(mu0, sigma0²)` plus the flow context `h`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorParams {
    pub mu0: Var,
    pub sigma0: Var,
    pub h: Var,
}

#[derive(Clone, Debug)]
struct Encoder {
    trunk: Mlp,
    head: Linear,
}

#[derive(Clone, Debug)]
struct Decoder {
    blocks: Vec<ResidualBlock>,
    output: Linear,
}

/// Encoder (with flow), generator and regressor sharing one parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Option<Encoder>,
    flow: FlowChain,
    decoder: Decoder,
    regressor: Mlp,
}

/// Independent initialization streams so that, for a given seed, each
/// network starts from the same weights whatever the other networks look like.
fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Zeroes the mean and scale rows of the encoder head and sets the scale
/// bias to `softplus⁻¹(prior_std)`, so the initial posterior is the prior.
fn start_at_prior(params: &mut ParamStore, head: &Linear, latent: usize, prior_std: f64) {
    let width = head.in_dim;
    let w = &mut params.get_mut(head.w).value;
    w.data_mut()[..2 * latent * width].fill(0.0);
    let b = &mut params.get_mut(head.b).value;
    b.data_mut()[..latent].fill(0.0);
    b.data_mut()[latent..2 * latent].fill(prior_std.exp_m1().ln());
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let config = config.normalized();
        config.validate()?;
        let mut params = ParamStore::new();
        let latent = config.latent_dim;

        let encoder = (latent > 0).then(|| {
            let mut rng = init_rng(seed, 1);
            let trunk = Mlp::new(
                &mut params,
                "enc",
                ParamGroup::Encoder,
                config.feature_dim,
                &config.encoder_widths,
                Activation::Relu,
                Activation::Relu,
                &mut rng,
            );
            let width = trunk.out_dim().unwrap_or(config.feature_dim);
            let head = Linear::new(
                &mut params,
                "enc.head",
                ParamGroup::Encoder,
                width,
                2 * latent + config.context_dim,
                Activation::Identity,
                &mut rng,
            );
            start_at_prior(&mut params, &head, latent, config.prior_std());
            Encoder { trunk, head }
        });

        let flow = {
            let mut rng = init_rng(seed, 2);
            FlowChain::new(
                &mut params,
                "flow",
                ParamGroup::Encoder,
                latent,
                config.context_dim,
                config.flow_steps,
                &config.made_widths,
                config.gate_bias,
                &mut rng,
            )
        };

        let decoder = {
            let mut rng = init_rng(seed, 3);
            let mut d = latent + config.attr_dim;
            let mut blocks = Vec::with_capacity(config.decoder_widths.len());
            for (i, &w) in config.decoder_widths.iter().enumerate() {
                blocks.push(ResidualBlock::new(
                    &mut params,
                    &format!("dec.{i}"),
                    ParamGroup::Generator,
                    d,
                    w,
                    &mut rng,
                ));
                d = w;
            }
            let output = Linear::new(
                &mut params,
                "dec.out",
                ParamGroup::Generator,
                d,
                config.feature_dim,
                Activation::Sigmoid,
                &mut rng,
            );
            Decoder { blocks, output }
        };

        let regressor = {
            let mut rng = init_rng(seed, 4);
            let mut widths = config.regressor_widths.clone();
            widths.push(config.attr_dim);
            Mlp::new(
                &mut params,
                "reg",
                ParamGroup::Regressor,
                config.feature_dim,
                &widths,
                Activation::Relu,
                Activation::Identity,
                &mut rng,
            )
        };

        Ok(ModelBundle {
            config,
            params,
            encoder,
            flow,
            decoder,
            regressor,
        })
    }

    pub fn prior(&self) -> Prior {
        Prior::new(self.config.prior_std())
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn flow(&self) -> &FlowChain {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowChain {
        &mut self.flow
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params.ids_in(group)
    }

    /// Every linear layer that is not masked, for initialization diagnostics.
    pub fn dense_layers(&self) -> Vec<&Linear> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.extend(e.trunk.layers.iter());
            out.push(&e.head);
        }
        for b in &self.decoder.blocks {
            out.extend(b.inner.iter());
            out.extend(b.projection.iter());
        }
        out.push(&self.decoder.output);
        out.extend(self.regressor.layers.iter());
        out
    }

    pub fn decoder_blocks(&self) -> &[ResidualBlock] {
        &self.decoder.blocks
    }

    fn check_width(op: &'static str, tape: &Tape, v: Var, width: usize) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != width {
            return Err(Error::dim(op, format!("input {s:?} does not match width {width}")));
        }
        Ok(())
    }

    /// Initial posterior parameters for a batch of image features.
    pub fn encode(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<PosteriorParams> {
        Self::check_width("encode", tape, x, self.config.feature_dim)?;
        let rows = tape.shape(x)[0];
        let Some(enc) = &self.encoder else {
            let empty = tape.constant(Tensor::zeros(&[rows, 0]));
            return Ok(PosteriorParams {
                mu0: empty,
                sigma0: empty,
                h: empty,
            });
        };
        let l = self.config.latent_dim;
        let c = self.config.context_dim;
        let t = enc.trunk.forward(tape, params, x)?;
        let out = enc.head.forward(tape, params, t)?;
        let parts = tape.split(out, 1, &[l, l, c])?;
        let sigma0 = tape.softplus(parts[1])?;
        Ok(PosteriorParams {
            mu0: parts[0],
            sigma0,
            h: parts[2],
        })
    }

    /// Standard-normal noise for [`ModelBundle::posterior_sample`].
    pub fn sample_eps<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[rows, self.config.latent_dim], rng)
    }

    /// `z0 = mu0 + sigma0 ⊙ eps`, refined by the flow with context `h`.
    pub fn posterior_sample(&self, tape: &mut Tape, params: &Bound, post: &PosteriorParams, eps: Var) -> Result<FlowSample> {
        let l = self.config.latent_dim;
        let es = tape.shape(eps).to_vec();
        let rows = tape.shape(post.mu0)[0];
        if es != [rows, l] {
            return Err(Error::dim(
                "posterior_sample",
                format!("noise {es:?} does not match [{rows}, {l}]"),
            ));
        }
        let scaled = tape.mul(post.sigma0, eps)?;
        let z0 = tape.add(post.mu0, scaled)?;
        let log_q0 = if l == 0 {
            tape.constant(Tensor::zeros(&[rows]))
        } else {
            gaussian_log_density(tape, z0, post.mu0, post.sigma0)?
        };
        let mut sample = self.flow.forward(tape, params, z0, log_q0, post.h)?;
        sample.eps = Some(eps);
        Ok(sample)
    }

    /// Generated image features for latent codes `z` and sketch features `a`.
    pub fn decode(&self, tape: &mut Tape, params: &Bound, z: Var, a: Var) -> Result<Var> {
        Self::check_width("decode", tape, a, self.config.attr_dim)?;
        Self::check_width("decode", tape, z, self.config.latent_dim)?;
        let mut x = tape.concat(&[z, a], 1)?;
        for b in &self.decoder.blocks {
            x = b.forward(tape, params, x)?;
        }
        self.decoder.output.forward(tape, params, x)
    }

    /// Regressed sketch features for image features `x`.
    pub fn regress(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        Self::check_width("regress", tape, x, self.config.feature_dim)?;
        self.regressor.forward(tape, params, x)
    }

    /// Decodes `count` prior draws paired with one sketch. Each candidate
    /// consumes exactly `latent_dim` normal draws from `rng`, in order.
    pub fn generate_from_prior<R: Rng + ?Sized>(&self, a: &[f64], count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::Contract("candidate count must be at least 1".into()));
        }
        if a.len() != self.config.attr_dim {
            return Err(Error::dim(
                "generate_from_prior",
                format!("sketch width {} != {}", a.len(), self.config.attr_dim),
            ));
        }
        let z = self.prior().sample(count, self.config.latent_dim, rng);
        let rows: Vec<&[f64]> = (0..count).map(|_| a).collect();
        let a = Tensor::from_rows(&rows, self.config.attr_dim)?;
        let mut tape = Tape::unchecked();
        let params = self.params.bind_constant(&mut tape);
        let zv = tape.constant(z);
        let av = tape.constant(a);
        let x = self.decode(&mut tape, &params, zv, av)?;
        let out = tape.value(x);
        Ok((0..count).map(|i| out.row(i).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny(variant: Variant) -> ModelBundle {
        let cfg = ModelConfig {
            variant,
            feature_dim: 6,
            attr_dim: 4,
            latent_dim: 3,
            flow_steps: 2,
            context_dim: 2,
            encoder_widths: vec![8],
            decoder_widths: vec![8, 8],
            regressor_widths: vec![8],
            made_widths: vec![6],
            ..ModelConfig::default()
        };
        ModelBundle::new(cfg, 7).unwrap()
    }

    #[test]
    fn zero_encoder_gives_softplus_zero() {
        let mut m = tiny(Variant::FeedbackVae);
        let ids = m.group_ids(ParamGroup::Encoder);
        let enc_ids: Vec<_> = ids
            .into_iter()
            .filter(|id| m.params.get(*id).name.starts_with("enc"))
            .collect();
        for id in enc_ids {
            let shape = m.params.get(id).value.shape().to_vec();
            m.params.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 6], 0.3));
        let p = m.encode(&mut tape, &b, x).unwrap();
        assert!(tape.value(p.mu0).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(p.h).data().iter().all(|&v| v == 0.0));
        for &s in tape.value(p.sigma0).data() {
            assert!((s - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_gives_mean() {
        let m = tiny(Variant::NoIaf);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[2, 6], 0.3));
        let p = m.encode(&mut tape, &b, x).unwrap();
        let eps = tape.constant(Tensor::zeros(&[2, 3]));
        let s = m.posterior_sample(&mut tape, &b, &p, eps).unwrap();
        assert_eq!(tape.value(s.z0), tape.value(p.mu0));
        assert_eq!(tape.value(s.z_t), tape.value(s.z0));
    }

    #[test]
    fn decoder_output_in_unit_interval() {
        let m = tiny(Variant::FeedbackVae);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let z = tape.constant(Tensor::randn(&[5, 3], &mut rng));
        let a = tape.constant(Tensor::randn(&[5, 4], &mut rng));
        let x = m.decode(&mut tape, &b, z, a).unwrap();
        assert_eq!(tape.shape(x), &[5, 6]);
        assert!(tape.value(x).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_regressor_outputs_zero() {
        let mut m = tiny(Variant::FeedbackVae);
        for id in m.group_ids(ParamGroup::Regressor) {
            let shape = m.params.get(id).value.shape().to_vec();
            m.params.get_mut(id).value = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let x = tape.constant(Tensor::full(&[3, 6], 0.9));
        let a = m.regress(&mut tape, &b, x).unwrap();
        assert_eq!(tape.shape(a), &[3, 4]);
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatches_rejected() {
        let m = tiny(Variant::FeedbackVae);
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape);
        let bad = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(m.encode(&mut tape, &b, bad).is_err());
        assert!(m.regress(&mut tape, &b, bad).is_err());
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(m.decode(&mut tape, &b, z, bad).is_err());
    }

    #[test]
    fn feedback_auto_is_deterministic_in_sketch() {
        let m = tiny(Variant::FeedbackAuto);
        assert_eq!(m.latent_dim(), 0);
        let a = [0.1, 0.5, 0.2, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = m.generate_from_prior(&a, 4, &mut rng).unwrap();
        for row in &c[1..] {
            assert_eq!(row, &c[0]);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        assert_eq!(m.generate_from_prior(&a, 1, &mut rng2).unwrap()[0], c[0]);
    }

    #[test]
    fn generation_is_seed_reproducible() {
        let m = tiny(Variant::FeedbackVae);
        let a = [0.1, 0.5, 0.2, 0.9];
        let g = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.generate_from_prior(&a, 1, &mut rng).unwrap()
        };
        assert_eq!(g(5), g(5));
        assert!(m.generate_from_prior(&a, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn parameter_groups_are_disjoint_and_complete() {
        let m = tiny(Variant::FeedbackVae);
        let total: usize = ParamGroup::ALL.iter().map(|g| m.group_ids(*g).len()).sum();
        assert_eq!(total, m.params.len());
        assert!(m.group_ids(ParamGroup::Encoder).iter().all(|id| {
            let n = &m.params.get(*id).name;
            n.starts_with("enc") || n.starts_with("flow")
        }));
    }
}
