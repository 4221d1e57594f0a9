use std::f64::consts::PI;

use rand::Rng;

use super::made::{MadeNetwork, Ordering};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamGroup, ParamId, ParamStore};

pub const DEFAULT_GATE_BIAS: f64 = 2.0;

/// Result of `z_next = mu + sigma ⊙ z_prev`.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub z: Var,
    /// Per-row `Σ_i log sigma_i`, shape `[batch]`.
    pub log_det: Var,
}

/// Applies an explicit affine autoregressive update.
pub fn affine_step(tape: &mut Tape, z_prev: Var, mu: Var, sigma: Var, log_sigma: Var) -> Result<StepOutput> {
    let scaled = tape.mul(sigma, z_prev)?;
    let z = tape.add(mu, scaled)?;
    let log_det = tape.sum(log_sigma, Some(1))?;
    Ok(StepOutput { z, log_det })
}

/// One inverse autoregressive flow step.
#[derive(Clone, Debug)]
pub struct IafStep {
    pub made: MadeNetwork,
    pub gate_bias: f64,
    /// Replace `(mu, sigma)` by `(0, 1)`; used to verify that an identity
    /// flow reduces to its base distribution.
    #[doc(hidden)]
    pub force_identity: bool,
}

impl IafStep {
    /// `(mu, sigma, log sigma)` for the current input.
    pub fn gate(&self, tape: &mut Tape, params: &Bound, z_prev: Var, h: Var) -> Result<(Var, Var, Var)> {
        let (m, s) = self.made.forward(tape, params, z_prev, h)?;
        if self.force_identity {
            let shape = tape.shape(z_prev).to_vec();
            let zero = tape.constant(Tensor::zeros(&shape));
            let one = tape.constant(Tensor::full(&shape, 1.0));
            let zero_log = tape.constant(Tensor::zeros(&shape));
            return Ok((zero, one, zero_log));
        }
        let pre = tape.add_scalar(s, self.gate_bias)?;
        let sigma = tape.sigmoid(pre)?;
        let log_sigma = tape.log_sigmoid(pre)?;
        Ok((m, sigma, log_sigma))
    }

    pub fn apply(&self, tape: &mut Tape, params: &Bound, z_prev: Var, h: Var) -> Result<StepOutput> {
        let (mu, sigma, log_sigma) = self.gate(tape, params, z_prev, h)?;
        if tape.value(sigma).data().iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::NonFinite {
                op: "iaf gate".into(),
            });
        }
        affine_step(tape, z_prev, mu, sigma, log_sigma)
    }

    /// Recovers `z_prev` from `z_next` one degree at a time.
    pub fn invert(&self, store: &ParamStore, z_next: &Tensor, h: &Tensor) -> Result<Tensor> {
        let d = self.made.latent_dim;
        if z_next.rank() != 2 || z_next.cols() != d {
            return Err(Error::dim(
                "iaf_step_invert",
                format!("input {:?} does not match latent width {d}", z_next.shape()),
            ));
        }
        let rows = z_next.rows();
        let degrees = self.made.input_degrees().to_vec();
        let mut tape = Tape::new();
        let params = store.bind_constant(&mut tape);
        let hv = tape.constant(h.clone());
        let mut z_prev = Tensor::zeros(&[rows, d]);
        for k in 1..=d {
            let zv = tape.constant(z_prev.clone());
            let (mu, sigma, _) = self.gate(&mut tape, &params, zv, hv)?;
            let mu = tape.value(mu).data().to_vec();
            let sigma = tape.value(sigma).data().to_vec();
            for (j, _) in degrees.iter().enumerate().filter(|(_, &deg)| deg == k) {
                for r in 0..rows {
                    let idx = r * d + j;
                    z_prev.data_mut()[idx] = (z_next.data()[idx] - mu[idx]) / sigma[idx];
                }
            }
        }
        Ok(z_prev)
    }
}

/// Latent draw carried through a flow chain. All fields live on one tape.
#[derive(Clone, Copy, Debug)]
pub struct FlowSample {
    pub eps: Option<Var>,
    pub z0: Var,
    pub z_t: Var,
    /// `Σ_t Σ_i log sigma_{t,i}` per row.
    pub log_det_sum: Var,
    /// Initial Gaussian log-density per row.
    pub log_q0: Var,
}

impl FlowSample {
    /// `log q(z_T | x) = log q(z_0 | x) − Σ log det`, per row.
    pub fn log_density(&self, tape: &mut Tape) -> Result<Var> {
        tape.sub(self.log_q0, self.log_det_sum)
    }
}

/// Sequence of IAF steps sharing latent and context widths.
#[derive(Clone, Debug)]
pub struct FlowChain {
    pub steps: Vec<IafStep>,
    pub latent_dim: usize,
    pub context_dim: usize,
}

impl FlowChain {
    /// Orderings alternate natural / reversed between consecutive steps.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        latent_dim: usize,
        context_dim: usize,
        steps: usize,
        made_widths: &[usize],
        gate_bias: f64,
        rng: &mut R,
    ) -> Self {
        let steps = (0..steps)
            .map(|t| {
                let ordering = if t % 2 == 0 {
                    Ordering::Natural
                } else {
                    Ordering::Reversed
                };
                IafStep {
                    made: MadeNetwork::new(
                        store,
                        &format!("{name}.{t}"),
                        group,
                        latent_dim,
                        context_dim,
                        made_widths,
                        ordering,
                        rng,
                    ),
                    gate_bias,
                    force_identity: false,
                }
            })
            .collect();
        FlowChain {
            steps,
            latent_dim,
            context_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.steps.iter().flat_map(|s| s.made.param_ids()).collect()
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, z0: Var, log_q0: Var, h: Var) -> Result<FlowSample> {
        let rows = tape.shape(z0)[0];
        let mut z = z0;
        let mut log_det_sum = tape.constant(Tensor::zeros(&[rows]));
        for step in &self.steps {
            let out = step.apply(tape, params, z, h)?;
            z = out.z;
            log_det_sum = tape.add(log_det_sum, out.log_det)?;
        }
        Ok(FlowSample {
            eps: None,
            z0,
            z_t: z,
            log_det_sum,
            log_q0,
        })
    }

    /// Maps a final latent back to the base draw.
    pub fn invert(&self, store: &ParamStore, z_t: &Tensor, h: &Tensor) -> Result<Tensor> {
        let mut z = z_t.clone();
        for step in self.steps.iter().rev() {
            z = step.invert(store, &z, h)?;
        }
        Ok(z)
    }

    /// Exact `log q(z_T)` of an arbitrary point, by inverting the chain and
    /// summing per-step log-determinants along the recovered path.
    pub fn log_density_by_inversion(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        h: &Tensor,
        mu0: &Tensor,
        sigma0: &Tensor,
    ) -> Result<Vec<f64>> {
        let z0 = self.invert(store, z_t, h)?;
        let mut tape = Tape::new();
        let params = store.bind_constant(&mut tape);
        let z0v = tape.constant(z0);
        let mu = tape.constant(mu0.clone());
        let sigma = tape.constant(sigma0.clone());
        let hv = tape.constant(h.clone());
        let log_q0 = gaussian_log_density(&mut tape, z0v, mu, sigma)?;
        let sample = self.forward(&mut tape, &params, z0v, log_q0, hv)?;
        let lq = sample.log_density(&mut tape)?;
        Ok(tape.value(lq).data().to_vec())
    }
}

/// `Σ_i log N(z_i; mu_i, sigma_i²)` per row. `mu` and `sigma` broadcast.
pub fn gaussian_log_density(tape: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    let diff = tape.sub(z, mu)?;
    let std = tape.div(diff, sigma)?;
    let sq = tape.square(std)?;
    let half = tape.scale(sq, -0.5)?;
    let log_sigma = tape.log(sigma)?;
    let mut t = tape.sub(half, log_sigma)?;
    t = tape.add_scalar(t, -0.5 * (2.0 * PI).ln())?;
    let rank = tape.shape(t).len();
    tape.sum(t, Some(rank - 1))
}

/// Log-density at a flow path: `log N(z0; mu0, sigma0²) − Σ_t Σ_i log sigma_{t,i}`.
pub fn flow_log_density(tape: &mut Tape, sample: &FlowSample, mu0: Var, sigma0: Var) -> Result<Var> {
    let base = gaussian_log_density(tape, sample.z0, mu0, sigma0)?;
    tape.sub(base, sample.log_det_sum)
}
