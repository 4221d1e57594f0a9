//! Finite-difference verification of every op, layer, flow component, loss
//! and the complete generator objective.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_with, GradCheckOptions, OpKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::flow::{gaussian_log_density, FlowChain, IafStep, MadeNetwork, Ordering, DEFAULT_GATE_BIAS};
use crate::losses::{
    cyclic_loss, generator_objective, kl_flow_mc, kl_gaussian_closed_form, latent_consistency_loss,
    prior_reconstruction_loss, reconstruction_loss, regressor_objective, GeneratorInputs, KlEstimator, LossWeights,
};
use crate::model::{ModelBundle, ModelConfig, Prior, Variant};
use crate::nn::{Activation, Bound, Linear, Mlp, ParamGroup, ParamStore, ResidualBlock};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Backward rule to corrupt, to confirm that the suite notices.
    pub fault: Option<OpKind>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tolerance: DEFAULT_TOLERANCE,
            step: 1e-5,
            fault: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
    pub seconds: f64,
}

/// `Σ out ⊙ R` for a fixed random `R`: a generic scalar probe of a tensor.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::uniform(tape.shape(v), -1.0, 1.0, &mut rng);
    let rv = tape.constant(r);
    let m = tape.mul(v, rv)?;
    tape.sum(m, None)
}

fn probe_all(tape: &mut Tape, vs: &[Var], seed: u64) -> Result<Var> {
    let mut acc = probe(tape, vs[0], seed)?;
    for (i, v) in vs.iter().enumerate().skip(1) {
        let p = probe(tape, *v, seed + i as u64)?;
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Random tensor whose entries keep at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

struct Suite {
    opts: SuiteOptions,
    results: Vec<CheckResult>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let start = Instant::now();
        let go = GradCheckOptions {
            step: self.opts.step,
            fault: self.opts.fault,
            max_coords_per_input: None,
        };
        let report = grad_check_with(&go, f, inputs)?;
        let passed = report.max_rel_error <= self.opts.tolerance;
        self.results.push(CheckResult {
            name: name.to_string(),
            max_rel_error: report.max_rel_error,
            coords: report.coords_checked,
            passed,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn ops(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let a34 = Tensor::randn(&[3, 4], rng);
        let b34 = Tensor::randn(&[3, 4], rng);
        let b45 = Tensor::randn(&[4, 5], rng);
        let b54 = Tensor::randn(&[5, 4], rng);
        let row4 = Tensor::randn(&[4], rng);
        let col31 = Tensor::randn(&[3, 1], rng);
        let pos34 = Tensor::uniform(&[3, 4], 0.5, 2.0, rng);
        let kinked = away_from_zero(&[3, 4], 0.05, rng);

        self.check("op/matmul", &[a34.clone(), b45], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, 1)
        })?;
        self.check("op/matmul_nt", &[a34.clone(), b54], |t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            probe(t, y, 2)
        })?;
        self.check("op/add_broadcast_row", &[a34.clone(), row4.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.square(y)?;
            probe(t, y, 3)
        })?;
        self.check("op/sub_broadcast_col", &[a34.clone(), col31.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.square(y)?;
            probe(t, y, 4)
        })?;
        self.check("op/mul", &[a34.clone(), b34.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 5)
        })?;
        self.check("op/mul_broadcast", &[a34.clone(), col31], |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, 6)
        })?;
        self.check("op/div", &[a34.clone(), pos34.clone()], |t, v| {
            let y = t.div(v[0], v[1])?;
            probe(t, y, 7)
        })?;
        self.check("op/div_broadcast", &[a34.clone(), Tensor::uniform(&[4], 0.5, 2.0, rng)], |t, v| {
            let y = t.div(v[0], v[1])?;
            probe(t, y, 8)
        })?;
        let unary: [(&str, fn(&mut Tape, Var) -> Result<Var>, &Tensor); 9] = [
            ("op/neg", Tape::neg, &a34),
            ("op/exp", Tape::exp, &a34),
            ("op/log", Tape::log, &pos34),
            ("op/sigmoid", Tape::sigmoid, &a34),
            ("op/softplus", Tape::softplus, &a34),
            ("op/log_sigmoid", Tape::log_sigmoid, &a34),
            ("op/relu", Tape::relu, &kinked),
            ("op/square", Tape::square, &a34),
            ("op/exp_large", Tape::exp, &pos34),
        ];
        for (i, (name, op, x)) in unary.into_iter().enumerate() {
            self.check(name, std::slice::from_ref(x), |t, v| {
                let y = op(t, v[0])?;
                probe(t, y, 10 + i as u64)
            })?;
        }
        self.check("op/scale", &[a34.clone()], |t, v| {
            let y = t.scale(v[0], -2.5)?;
            probe(t, y, 20)
        })?;
        self.check("op/add_scalar", &[a34.clone()], |t, v| {
            let y = t.add_scalar(v[0], 0.7)?;
            let y = t.square(y)?;
            probe(t, y, 21)
        })?;
        for axis in [None, Some(0), Some(1)] {
            self.check(&format!("op/sum_{axis:?}"), &[a34.clone()], |t, v| {
                let y = t.sum(v[0], axis)?;
                let y = t.square(y)?;
                probe(t, y, 22)
            })?;
            self.check(&format!("op/mean_{axis:?}"), &[a34.clone()], |t, v| {
                let y = t.mean(v[0], axis)?;
                let y = t.square(y)?;
                probe(t, y, 23)
            })?;
        }
        self.check("op/concat", &[a34.clone(), b34.clone()], |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            let y = t.square(y)?;
            probe(t, y, 24)
        })?;
        self.check("op/concat_rows", &[a34.clone(), b34.clone()], |t, v| {
            let y = t.concat(&[v[0], v[1]], 0)?;
            let y = t.square(y)?;
            probe(t, y, 25)
        })?;
        self.check("op/narrow", &[a34.clone()], |t, v| {
            let y = t.narrow(v[0], 1, 1, 2)?;
            let y = t.square(y)?;
            probe(t, y, 26)
        })?;
        self.check("op/split", &[a34.clone()], |t, v| {
            let parts = t.split(v[0], 1, &[1, 3])?;
            let a = t.square(parts[0])?;
            let b = t.exp(parts[1])?;
            probe_all(t, &[a, b], 27)
        })?;
        self.check("op/reshape", &[a34], |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            let y = t.square(y)?;
            probe(t, y, 28)
        })?;
        Ok(())
    }

    fn layers(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let x = Tensor::randn(&[3, 6], rng);
        for (name, act) in [
            ("layer/linear_identity", Activation::Identity),
            ("layer/linear_relu", Activation::Relu),
            ("layer/linear_sigmoid", Activation::Sigmoid),
        ] {
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "l", ParamGroup::Generator, 6, 5, act, rng);
            let mut inputs = store.values();
            inputs.push(x.clone());
            let np = store.len();
            self.check(name, &inputs, |t, v| {
                let b = Bound::from_vars(v[..np].to_vec());
                let y = lin.forward(t, &b, v[np])?;
                probe(t, y, 30)
            })?;
        }

        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", ParamGroup::Regressor, 6, &[7, 4], Activation::Relu, Activation::Identity, rng);
        let np = store.len();
        let mut inputs = store.values();
        inputs.push(x.clone());
        self.check("layer/mlp", &inputs, |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let y = mlp.forward(t, &b, v[np])?;
            probe(t, y, 31)
        })?;

        for (name, out) in [("layer/residual_identity_skip", 6), ("layer/residual_projection", 9)] {
            let mut store = ParamStore::new();
            let block = ResidualBlock::new(&mut store, "r", ParamGroup::Generator, 6, out, rng);
            let np = store.len();
            let mut inputs = store.values();
            inputs.push(x.clone());
            self.check(name, &inputs, |t, v| {
                let b = Bound::from_vars(v[..np].to_vec());
                let y = block.forward(t, &b, v[np])?;
                probe(t, y, 32)
            })?;
        }
        Ok(())
    }

    fn flow(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (d, c) = (4, 3);
        let z = Tensor::randn(&[3, d], rng);
        let h = Tensor::randn(&[3, c], rng);
        for ordering in [Ordering::Natural, Ordering::Reversed] {
            let mut store = ParamStore::new();
            let made = MadeNetwork::new(&mut store, "made", ParamGroup::Encoder, d, c, &[8, 8], ordering, rng);
            randomize(&mut store, rng);
            let np = store.len();
            let mut inputs = store.values();
            inputs.push(z.clone());
            inputs.push(h.clone());
            self.check(&format!("flow/made_{ordering:?}").to_lowercase(), &inputs, |t, v| {
                let b = Bound::from_vars(v[..np].to_vec());
                let (m, s) = made.forward(t, &b, v[np], v[np + 1])?;
                probe_all(t, &[m, s], 40)
            })?;
        }

        let mut store = ParamStore::new();
        let step = IafStep {
            made: MadeNetwork::new(&mut store, "s", ParamGroup::Encoder, d, c, &[8], Ordering::Natural, rng),
            gate_bias: DEFAULT_GATE_BIAS,
            force_identity: false,
        };
        randomize(&mut store, rng);
        let np = store.len();
        let mut inputs = store.values();
        inputs.push(z.clone());
        inputs.push(h.clone());
        self.check("flow/iaf_step", &inputs, |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let out = step.apply(t, &b, v[np], v[np + 1])?;
            probe_all(t, &[out.z, out.log_det], 41)
        })?;

        let mut store = ParamStore::new();
        let chain = FlowChain::new(&mut store, "f", ParamGroup::Encoder, d, c, 3, &[8], DEFAULT_GATE_BIAS, rng);
        randomize(&mut store, rng);
        let np = store.len();
        let mu = Tensor::randn(&[3, d], rng);
        let sigma = Tensor::uniform(&[3, d], 0.5, 1.5, rng);
        let mut inputs = store.values();
        inputs.extend([z.clone(), h.clone(), mu, sigma]);
        self.check("flow/chain_log_density", &inputs, |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let (z0, hv, mu, sigma) = (v[np], v[np + 1], v[np + 2], v[np + 3]);
            let lq0 = gaussian_log_density(t, z0, mu, sigma)?;
            let s = chain.forward(t, &b, z0, lq0, hv)?;
            let lq = s.log_density(t)?;
            probe_all(t, &[s.z_t, lq], 42)
        })?;
        Ok(())
    }

    fn model_and_losses(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let cfg = ModelConfig {
            variant: Variant::FeedbackVae,
            feature_dim: 16,
            attr_dim: 8,
            latent_dim: 4,
            flow_steps: 3,
            context_dim: 8,
            prior_scale: 0.5,
            encoder_widths: vec![12],
            decoder_widths: vec![12, 12],
            regressor_widths: vec![10],
            made_widths: vec![6],
            ..ModelConfig::default()
        };
        let mut bundle = ModelBundle::new(cfg, self.opts.seed)?;
        randomize(&mut bundle.params, rng);
        let n = 3;
        let x = Tensor::uniform(&[n, 16], 0.05, 0.95, rng);
        let a = Tensor::uniform(&[n, 8], 0.05, 0.95, rng);
        let eps = Tensor::randn(&[n, 4], rng);
        let z_prior = bundle.prior().sample(n, 4, rng);
        let np = bundle.params.len();
        let params = bundle.params.values();
        let with = |extra: &[&Tensor]| -> Vec<Tensor> {
            let mut v = params.clone();
            v.extend(extra.iter().map(|t| (*t).clone()));
            v
        };
        let bundle = &bundle;

        self.check("model/encode", &with(&[&x]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let p = bundle.encode(t, &b, v[np])?;
            probe_all(t, &[p.mu0, p.sigma0, p.h], 50)
        })?;
        self.check("model/posterior_sample", &with(&[&x]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let p = bundle.encode(t, &b, v[np])?;
            let e = t.constant(eps.clone());
            let s = bundle.posterior_sample(t, &b, &p, e)?;
            let lq = s.log_density(t)?;
            probe_all(t, &[s.z_t, lq], 51)
        })?;
        self.check("model/decode", &with(&[&z_prior, &a]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let y = bundle.decode(t, &b, v[np], v[np + 1])?;
            probe(t, y, 52)
        })?;
        self.check("model/regress", &with(&[&x]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let y = bundle.regress(t, &b, v[np])?;
            probe(t, y, 53)
        })?;

        let xh = Tensor::uniform(&[n, 16], 0.05, 0.95, rng);
        self.check("loss/reconstruction", &[xh, x.clone()], |t, v| reconstruction_loss(t, v[0], v[1]))?;
        let mu = Tensor::randn(&[n, 4], rng);
        let sigma = Tensor::uniform(&[n, 4], 0.3, 1.5, rng);
        self.check("loss/kl_closed_form", &[mu, sigma], |t, v| kl_gaussian_closed_form(t, v[0], v[1], 0.7))?;
        let prior = Prior::new(0.5);
        self.check("loss/kl_flow_mc", &with(&[&x]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let p = bundle.encode(t, &b, v[np])?;
            let e = t.constant(eps.clone());
            let s = bundle.posterior_sample(t, &b, &p, e)?;
            kl_flow_mc(t, &s, &prior)
        })?;
        self.check("loss/regressor", &with(&[&x]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let av = t.constant(a.clone());
            let xg = t.constant(xh_of(&x));
            Ok(regressor_objective(t, bundle, &b, v[np], av, xg, 0.3)?.total)
        })?;
        self.check("loss/cyclic", &with(&[&z_prior]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let av = t.constant(a.clone());
            cyclic_loss(t, bundle, &b, v[np], av)
        })?;
        self.check("loss/prior_reconstruction", &with(&[&z_prior]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            let av = t.constant(a.clone());
            let xv = t.constant(x.clone());
            prior_reconstruction_loss(t, bundle, &b, v[np], xv, av)
        })?;
        self.check("loss/latent_consistency", &with(&[&x]), |t, v| {
            let b = Bound::from_vars(v[..np].to_vec());
            latent_consistency_loss(t, bundle, &b, v[np])
        })?;
        let weights = LossWeights {
            beta: 0.8,
            lambda_r: 0.3,
            lambda_c: 0.5,
            lambda_reg: 0.7,
            lambda_e: 0.9,
        };
        let eps_list = [eps.clone()];
        self.check("objective/generator_total", &params, |t, v| {
            let b = Bound::from_vars(v.to_vec());
            let inputs = GeneratorInputs {
                x: &x,
                a: &a,
                eps: &eps_list,
                z_prior: &z_prior,
            };
            Ok(generator_objective(t, bundle, &b, inputs, &weights, KlEstimator::Auto)?.total)
        })?;
        Ok(())
    }
}

fn xh_of(x: &Tensor) -> Tensor {
    let mut t = x.clone();
    t.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    t
}

/// Gives zero-initialized parameters random values so that every
/// gradient path is exercised.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        for v in p.value.data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut suite = Suite {
        opts: opts.clone(),
        results: Vec::new(),
    };
    suite.ops(&mut rng)?;
    suite.layers(&mut rng)?;
    suite.flow(&mut rng)?;
    suite.model_and_losses(&mut rng)?;
    Ok(suite.results)
}
