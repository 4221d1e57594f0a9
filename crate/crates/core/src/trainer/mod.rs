//! Alternating regressor / encoder-generator optimization with a stepwise
//! learning-rate schedule, per-epoch metrics and checkpoints.

mod checkpoint;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{Tape, Tensor};
use crate::data::{PairSet, Scaling};
use crate::error::{Error, Result};
use crate::losses::{generator_objective, regressor_objective, GeneratorInputs, KlEstimator, LossReport, LossWeights};
use crate::model::ModelBundle;
use crate::nn::{Adam, LrSchedule, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pairs_per_class: usize,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub kl_estimator: KlEstimator,
    /// Posterior draws averaged in a Monte-Carlo KL.
    pub kl_samples: usize,
    /// Run the evaluation hook every this many epochs; 0 disables it.
    pub eval_every: usize,
    /// Record elapsed seconds in the metrics log. Off by default so that
    /// logs are byte-for-byte reproducible.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 35,
            batch_size: 64,
            pairs_per_class: 1000,
            weights: LossWeights::default(),
            schedule: LrSchedule::default(),
            seed: 0,
            kl_estimator: KlEstimator::Auto,
            kl_samples: 1,
            eval_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.weights.problems();
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if self.pairs_per_class == 0 {
            out.push("pairs_per_class must be at least 1".into());
        }
        if self.kl_samples == 0 {
            out.push("kl_samples must be at least 1".into());
        }
        out
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    /// Largest gradient magnitude seen on a frozen parameter set during the
    /// epoch. Always 0 when the phases are properly separated.
    pub cross_phase_grad_max: f64,
    pub batches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

pub fn write_log_line<W: Write>(out: &mut W, entry: &EpochLog) -> Result<()> {
    let line = serde_json::to_string(entry)?;
    writeln!(out, "{line}").map_err(|e| Error::io("<metrics log>", e))
}

/// Outcome of a single batch update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossReport,
    pub cross_phase_grad_max: f64,
}

fn max_abs_grad(store: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter()
        .filter_map(|id| store.get(*id).grad.as_ref())
        .flat_map(|g| g.data().iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

fn check_finite(report: &LossReport) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(Error::NonFinite {
            op: format!("loss term '{term}'"),
        }),
        None => Ok(()),
    }
}

/// Model, optimizer states and noise stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    pub scaling: Option<Scaling>,
    encoder_ids: Vec<ParamId>,
    generator_ids: Vec<ParamId>,
    regressor_ids: Vec<ParamId>,
    opt_encoder: Adam,
    opt_generator: Adam,
    opt_regressor: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let encoder_ids = bundle.group_ids(ParamGroup::Encoder);
        let generator_ids = bundle.group_ids(ParamGroup::Generator);
        let regressor_ids = bundle.group_ids(ParamGroup::Regressor);
        let opt_encoder = Adam::new(&bundle.params, encoder_ids.clone());
        let opt_generator = Adam::new(&bundle.params, generator_ids.clone());
        let opt_regressor = Adam::new(&bundle.params, regressor_ids.clone());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            bundle,
            config,
            scaling: None,
            encoder_ids,
            generator_ids,
            regressor_ids,
            opt_encoder,
            opt_generator,
            opt_regressor,
            rng,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimizers(&self) -> [(&'static str, &Adam); 3] {
        [
            ("encoder", &self.opt_encoder),
            ("generator", &self.opt_generator),
            ("regressor", &self.opt_regressor),
        ]
    }

    fn check_pairs(&self, pairs: &PairSet) -> Result<()> {
        let cfg = &self.bundle.config;
        if pairs.images.cols() != cfg.feature_dim || pairs.sketches.cols() != cfg.attr_dim {
            return Err(Error::dim(
                "fit",
                format!(
                    "pairs have widths image {} / sketch {}, model expects {} / {}",
                    pairs.images.cols(),
                    pairs.sketches.cols(),
                    cfg.feature_dim,
                    cfg.attr_dim
                ),
            ));
        }
        Ok(())
    }

    /// Regressor update on `(x, a)` and freshly generated features, then an
    /// encoder/generator update with the regressor frozen.
    pub fn train_step(&mut self, x: &Tensor, a: &Tensor, lr: f64) -> Result<StepReport> {
        let rows = x.rows();
        let latent = self.bundle.latent_dim();
        let eps_reg = Tensor::randn(&[rows, latent], &mut self.rng);
        let eps_gen: Vec<Tensor> = (0..self.config.kl_samples)
            .map(|_| Tensor::randn(&[rows, latent], &mut self.rng))
            .collect();
        let z_prior = self.bundle.prior().sample(rows, latent, &mut self.rng);
        let mut cross = 0.0f64;

        // Regressor phase: generated features enter as data.
        let mut tape = Tape::new();
        let bound = self.bundle.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let av = tape.constant(a.clone());
        let post = self.bundle.encode(&mut tape, &bound, xv)?;
        let ev = tape.constant(eps_reg);
        let sample = self.bundle.posterior_sample(&mut tape, &bound, &post, ev)?;
        let x_gen = self.bundle.decode(&mut tape, &bound, sample.z_t, av)?;
        let x_gen = tape.detach(x_gen);
        let reg = regressor_objective(
            &mut tape,
            &self.bundle,
            &bound,
            xv,
            av,
            x_gen,
            self.config.weights.lambda_r,
        )?;
        let mut report = LossReport {
            l_sup: tape.item(reg.l_sup)?,
            l_unsup: tape.item(reg.l_unsup)?,
            total_regressor: tape.item(reg.total)?,
            ..LossReport::default()
        };
        check_finite(&report)?;
        tape.backward(reg.total)?;
        self.bundle.params.collect_grads(&tape, &bound);
        cross = cross
            .max(max_abs_grad(&self.bundle.params, &self.encoder_ids))
            .max(max_abs_grad(&self.bundle.params, &self.generator_ids));
        self.opt_regressor.step(&mut self.bundle.params, lr)?;
        self.bundle.params.clear_grads();
        drop(tape);

        // Encoder/generator phase with the regressor detached.
        let mut tape = Tape::new();
        let bound = self.bundle.params.bind(&mut tape);
        let frozen = bound.detached(&mut tape, &self.regressor_ids);
        let terms = generator_objective(
            &mut tape,
            &self.bundle,
            &frozen,
            GeneratorInputs {
                x,
                a,
                eps: &eps_gen,
                z_prior: &z_prior,
            },
            &self.config.weights,
            self.config.kl_estimator,
        )?;
        let g = terms.report(&tape)?;
        report.recon = g.recon;
        report.kl = g.kl;
        report.l_c = g.l_c;
        report.l_reg = g.l_reg;
        report.l_e = g.l_e;
        report.total_vae = g.total_vae;
        report.total_generator = g.total_generator;
        check_finite(&report)?;
        tape.backward(terms.total)?;
        self.bundle.params.collect_grads(&tape, &bound);
        cross = cross.max(max_abs_grad(&self.bundle.params, &self.regressor_ids));
        self.opt_encoder.step(&mut self.bundle.params, lr)?;
        self.opt_generator.step(&mut self.bundle.params, lr)?;
        self.bundle.params.clear_grads();

        Ok(StepReport {
            losses: report,
            cross_phase_grad_max: cross,
        })
    }

    /// One pass over a seeded shuffle of the pairs.
    pub fn run_epoch(&mut self, pairs: &PairSet) -> Result<EpochLog> {
        self.check_pairs(pairs)?;
        let start = Instant::now();
        let lr = self.config.schedule.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let mut reports = Vec::new();
        let mut cross = 0.0f64;
        for chunk in order.chunks(self.config.batch_size) {
            let (a, x) = pairs.gather(chunk);
            let step = self.train_step(&x, &a, lr)?;
            cross = cross.max(step.cross_phase_grad_max);
            reports.push(step.losses);
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            losses: LossReport::mean(&reports),
            cross_phase_grad_max: cross,
            batches: reports.len(),
            wall_time_s: self.config.log_wall_time.then(|| start.elapsed().as_secs_f64()),
            eval: None,
        })
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn fit(&mut self, pairs: &PairSet) -> Result<Vec<EpochLog>> {
        self.fit_with(pairs, |_, _| Ok(None), |_, _| Ok(()))
    }

    /// [`Trainer::fit`] with an evaluation hook, called every
    /// `eval_every` epochs, and a per-epoch observer.
    pub fn fit_with<E, O>(&mut self, pairs: &PairSet, mut eval: E, mut observe: O) -> Result<Vec<EpochLog>>
    where
        E: FnMut(&ModelBundle, usize) -> Result<Option<serde_json::Value>>,
        O: FnMut(&EpochLog, &Trainer) -> Result<()>,
    {
        self.check_pairs(pairs)?;
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let mut entry = self.run_epoch(pairs)?;
            if self.config.eval_every > 0 && entry.epoch % self.config.eval_every == 0 {
                entry.eval = eval(&self.bundle, entry.epoch)?;
            }
            log::info!(
                "epoch {} lr {:.0e} generator {:.5} regressor {:.5}",
                entry.epoch,
                entry.lr,
                entry.losses.total_generator,
                entry.losses.total_regressor
            );
            observe(&entry, self)?;
            log.push(entry);
        }
        Ok(log)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.restore()
    }
}
