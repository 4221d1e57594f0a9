use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Isotropic zero-mean Gaussian prior over the latent code.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub std: f64,
}

impl Prior {
    pub fn new(std: f64) -> Self {
        Prior { std }
    }

    /// `[rows, dim]` draws, row-major, consuming `rows * dim` normals.
    pub fn sample<R: Rng + ?Sized>(&self, rows: usize, dim: usize, rng: &mut R) -> Tensor {
        let data = (0..rows * dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                self.std * e
            })
            .collect();
        Tensor::new(vec![rows, dim], data).expect("shape matches data")
    }

    /// Per-row log-density of `z: [rows, dim]`.
    pub fn log_density(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let dim = tape.shape(z)[1] as f64;
        let scaled = tape.scale(z, 1.0 / self.std)?;
        let sq = tape.square(scaled)?;
        let s = tape.sum(sq, Some(1))?;
        let half = tape.scale(s, -0.5)?;
        tape.add_scalar(half, -dim * (self.std.ln() + 0.5 * (2.0 * PI).ln()))
    }

    pub fn log_density_row(&self, z: &[f64]) -> f64 {
        let d = z.len() as f64;
        -0.5 * z.iter().map(|v| (v / self.std).powi(2)).sum::<f64>()
            - d * (self.std.ln() + 0.5 * (2.0 * PI).ln())
    }
}
