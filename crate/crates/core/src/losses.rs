//! Training objectives: the beta-weighted VAE loss, regressor losses,
//! cyclic feedback, prior reconstruction and latent consistency.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::FlowSample;
use crate::model::{ModelBundle, Prior};
use crate::nn::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// KL weight in the VAE objective.
    pub beta: f64,
    /// Weight of the unsupervised regressor term.
    pub lambda_r: f64,
    /// Weight of the cyclic feedback term.
    pub lambda_c: f64,
    /// Weight of the prior reconstruction term.
    pub lambda_reg: f64,
    /// Weight of the latent consistency term.
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            lambda_r: 0.1,
            lambda_c: 0.1,
            lambda_reg: 0.1,
            lambda_e: 0.1,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        [
            ("beta", self.beta),
            ("lambda_r", self.lambda_r),
            ("lambda_c", self.lambda_c),
            ("lambda_reg", self.lambda_reg),
            ("lambda_e", self.lambda_e),
        ]
        .into_iter()
        .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
        .map(|(k, v)| format!("{k} must be finite and >= 0, got {v}"))
        .collect()
    }
}

/// Scalar values of every loss term for one batch (or an epoch average).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub kl: f64,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub l_c: f64,
    pub l_reg: f64,
    pub l_e: f64,
    pub total_vae: f64,
    pub total_regressor: f64,
    pub total_generator: f64,
}

impl LossReport {
    /// Fills the three totals from the components.
    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.total_vae = self.recon + w.beta * self.kl;
        self.total_regressor = self.l_sup + w.lambda_r * self.l_unsup;
        self.total_generator = generator_total(&self, w);
        self
    }

    pub fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("l_sup", self.l_sup),
            ("l_unsup", self.l_unsup),
            ("l_c", self.l_c),
            ("l_reg", self.l_reg),
            ("l_e", self.l_e),
            ("total_vae", self.total_vae),
            ("total_regressor", self.total_regressor),
            ("total_generator", self.total_generator),
        ]
    }

    /// First non-finite term, in field order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.fields().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.recon += r.recon;
            out.kl += r.kl;
            out.l_sup += r.l_sup;
            out.l_unsup += r.l_unsup;
            out.l_c += r.l_c;
            out.l_reg += r.l_reg;
            out.l_e += r.l_e;
            out.total_vae += r.total_vae;
            out.total_regressor += r.total_regressor;
            out.total_generator += r.total_generator;
        }
        out.recon /= n;
        out.kl /= n;
        out.l_sup /= n;
        out.l_unsup /= n;
        out.l_c /= n;
        out.l_reg /= n;
        out.l_e /= n;
        out.total_vae /= n;
        out.total_regressor /= n;
        out.total_generator /= n;
        out
    }
}

/// `L_VAE + λ_c·L_c + λ_reg·L_reg + λ_E·L_E`.
pub fn generator_total(report: &LossReport, w: &LossWeights) -> f64 {
    report.total_vae + w.lambda_c * report.l_c + w.lambda_reg * report.l_reg + w.lambda_e * report.l_e
}

/// How the KL term of the VAE objective is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlEstimator {
    /// Closed form without flow steps, Monte-Carlo with them.
    #[default]
    Auto,
    ClosedForm,
    MonteCarlo,
}

impl KlEstimator {
    pub fn name(self) -> &'static str {
        match self {
            KlEstimator::Auto => "auto",
            KlEstimator::ClosedForm => "closed-form",
            KlEstimator::MonteCarlo => "monte-carlo",
        }
    }
}

impl fmt::Display for KlEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KlEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [KlEstimator::Auto, KlEstimator::ClosedForm, KlEstimator::MonteCarlo]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kl estimator '{s}'")))
    }
}

fn same_shape(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape("mse", tape, pred, target)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    tape.mean(sq, None)
}

pub fn reconstruction_loss(tape: &mut Tape, x_hat: Var, x: Var) -> Result<Var> {
    same_shape("reconstruction_loss", tape, x_hat, x)?;
    mse(tape, x_hat, x)
}

/// `KL(N(mu, sigma²) || N(0, s²))` summed over coordinates and averaged
/// over rows.
pub fn kl_gaussian_closed_form(tape: &mut Tape, mu: Var, sigma: Var, prior_std: f64) -> Result<Var> {
    if !(prior_std.is_finite() && prior_std > 0.0) {
        return Err(Error::Domain {
            op: "kl_gaussian_closed_form",
            detail: format!("prior scale must be > 0, got {prior_std}"),
        });
    }
    same_shape("kl_gaussian_closed_form", tape, mu, sigma)?;
    if let Some(bad) = tape.value(sigma).data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain {
            op: "kl_gaussian_closed_form",
            detail: format!("sigma must be > 0, got {bad}"),
        });
    }
    let s2 = prior_std * prior_std;
    let log_sigma = tape.log(sigma)?;
    let sig2 = tape.square(sigma)?;
    let mu2 = tape.square(mu)?;
    let quad = tape.add(sig2, mu2)?;
    let quad = tape.scale(quad, 0.5 / s2)?;
    let t = tape.sub(quad, log_sigma)?;
    let t = tape.add_scalar(t, prior_std.ln() - 0.5)?;
    let per_row = tape.sum(t, Some(1))?;
    tape.mean(per_row, None)
}

/// Single-sample `log q(z_T) − log p(z_T)`, averaged over rows.
pub fn kl_flow_mc(tape: &mut Tape, sample: &FlowSample, prior: &Prior) -> Result<Var> {
    let log_q = sample.log_density(tape)?;
    let log_p = prior.log_density(tape, sample.z_t)?;
    let d = tape.sub(log_q, log_p)?;
    tape.mean(d, None)
}

#[derive(Clone, Copy, Debug)]
pub struct RegressorTerms {
    pub l_sup: Var,
    pub l_unsup: Var,
    pub total: Var,
}

/// Supervised term on real pairs plus `lambda_r` times the term on generated
/// features.
pub fn regressor_loss(
    tape: &mut Tape,
    a_hat_real: Var,
    a: Var,
    a_hat_gen: Var,
    a_gen_target: Var,
    lambda_r: f64,
) -> Result<RegressorTerms> {
    let l_sup = mse(tape, a_hat_real, a)?;
    let l_unsup = mse(tape, a_hat_gen, a_gen_target)?;
    let w = tape.scale(l_unsup, lambda_r)?;
    let total = tape.add(l_sup, w)?;
    Ok(RegressorTerms { l_sup, l_unsup, total })
}

/// `MSE(R(G(z, a)), a)`. Pass a bound whose regressor parameters are
/// detached so that only the generator receives gradient.
pub fn cyclic_loss(tape: &mut Tape, bundle: &ModelBundle, params: &Bound, z_prior: Var, a: Var) -> Result<Var> {
    let x_hat = bundle.decode(tape, params, z_prior, a)?;
    cyclic_loss_from(tape, bundle, params, x_hat, a)
}

fn cyclic_loss_from(tape: &mut Tape, bundle: &ModelBundle, params: &Bound, x_hat: Var, a: Var) -> Result<Var> {
    let a_hat = bundle.regress(tape, params, x_hat)?;
    mse(tape, a_hat, a)
}

/// `MSE(G(z, a), x)` with `z` drawn from the prior and `(x, a)` a real pair.
pub fn prior_reconstruction_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &Bound,
    z_prior: Var,
    x: Var,
    a: Var,
) -> Result<Var> {
    let x_hat = bundle.decode(tape, params, z_prior, a)?;
    mse(tape, x_hat, x)
}

/// Closed-form KL between the re-encoded initial posterior of `x_hat` and
/// the prior. Zero when the latent is empty.
pub fn latent_consistency_loss(tape: &mut Tape, bundle: &ModelBundle, params: &Bound, x_hat: Var) -> Result<Var> {
    if bundle.latent_dim() == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let post = bundle.encode(tape, params, x_hat)?;
    kl_gaussian_closed_form(tape, post.mu0, post.sigma0, bundle.prior().std)
}

/// Inputs for one generator-phase objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInputs<'a> {
    pub x: &'a Tensor,
    pub a: &'a Tensor,
    /// Posterior noise; the first draw drives reconstruction, all draws
    /// are averaged in a Monte-Carlo KL.
    pub eps: &'a [Tensor],
    pub z_prior: &'a Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub recon: Var,
    pub kl: Var,
    pub l_c: Var,
    pub l_reg: Var,
    pub l_e: Var,
    pub total_vae: Var,
    pub total: Var,
}

impl GeneratorTerms {
    pub fn report(&self, tape: &Tape) -> Result<LossReport> {
        Ok(LossReport {
            recon: tape.item(self.recon)?,
            kl: tape.item(self.kl)?,
            l_c: tape.item(self.l_c)?,
            l_reg: tape.item(self.l_reg)?,
            l_e: tape.item(self.l_e)?,
            total_vae: tape.item(self.total_vae)?,
            total_generator: tape.item(self.total)?,
            ..LossReport::default()
        })
    }
}

/// Builds the complete generator objective on `tape`.
pub fn generator_objective(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &Bound,
    inputs: GeneratorInputs<'_>,
    weights: &LossWeights,
    estimator: KlEstimator,
) -> Result<GeneratorTerms> {
    if inputs.eps.is_empty() {
        return Err(Error::Contract("at least one posterior noise draw is required".into()));
    }
    let x = tape.constant(inputs.x.clone());
    let a = tape.constant(inputs.a.clone());
    let post = bundle.encode(tape, params, x)?;
    let prior = bundle.prior();
    let closed = match estimator {
        KlEstimator::Auto => bundle.flow().is_empty(),
        KlEstimator::ClosedForm => {
            if !bundle.flow().is_empty() {
                return Err(Error::Config(
                    "closed-form KL is only exact without flow steps".into(),
                ));
            }
            true
        }
        KlEstimator::MonteCarlo => false,
    };

    let mut recon = None;
    let mut kl_parts = Vec::new();
    for (i, eps) in inputs.eps.iter().enumerate() {
        if i > 0 && (closed || bundle.latent_dim() == 0) {
            break;
        }
        let e = tape.constant(eps.clone());
        let sample = bundle.posterior_sample(tape, params, &post, e)?;
        if i == 0 {
            let x_hat = bundle.decode(tape, params, sample.z_t, a)?;
            recon = Some(reconstruction_loss(tape, x_hat, x)?);
        }
        if !closed && bundle.latent_dim() > 0 {
            kl_parts.push(kl_flow_mc(tape, &sample, &prior)?);
        }
    }
    let recon = recon.expect("first draw always decoded");
    let kl = if bundle.latent_dim() == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else if closed {
        kl_gaussian_closed_form(tape, post.mu0, post.sigma0, prior.std)?
    } else {
        let mut acc = kl_parts[0];
        for &k in &kl_parts[1..] {
            acc = tape.add(acc, k)?;
        }
        tape.scale(acc, 1.0 / kl_parts.len() as f64)?
    };

    let zp = tape.constant(inputs.z_prior.clone());
    let x_gen = bundle.decode(tape, params, zp, a)?;
    let l_c = cyclic_loss_from(tape, bundle, params, x_gen, a)?;
    let l_reg = mse(tape, x_gen, x)?;
    let l_e = latent_consistency_loss(tape, bundle, params, x_gen)?;

    let bkl = tape.scale(kl, weights.beta)?;
    let total_vae = tape.add(recon, bkl)?;
    let mut total = total_vae;
    for (term, w) in [(l_c, weights.lambda_c), (l_reg, weights.lambda_reg), (l_e, weights.lambda_e)] {
        let t = tape.scale(term, w)?;
        total = tape.add(total, t)?;
    }
    Ok(GeneratorTerms {
        recon,
        kl,
        l_c,
        l_reg,
        l_e,
        total_vae,
        total,
    })
}

/// Regressor objective on a real batch and generator output treated as data.
pub fn regressor_objective(
    tape: &mut Tape,
    bundle: &ModelBundle,
    params: &Bound,
    x: Var,
    a: Var,
    x_gen: Var,
    lambda_r: f64,
) -> Result<RegressorTerms> {
    let a_real = bundle.regress(tape, params, x)?;
    let a_gen = bundle.regress(tape, params, x_gen)?;
    regressor_loss(tape, a_real, a, a_gen, a, lambda_r)
}
