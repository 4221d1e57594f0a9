use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Xavier-uniform weights of shape `[fan_out, fan_in]`.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    if fan_in + fan_out == 0 {
        return Tensor::zeros(&[fan_out, fan_in]);
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_out, fan_in], -limit, limit, rng)
}

/// Fully connected layer `activation(x · Wᵀ + b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let w = store.register(format!("{name}.w"), group, xavier_uniform(out_dim, in_dim, rng));
        let b = store.register(format!("{name}.b"), group, Tensor::zeros(&[out_dim]));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn pre_activation(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim(
                "linear",
                format!("input {:?} does not match in-width {}", shape, self.in_dim),
            ));
        }
        let y = tape.matmul_nt(x, params.var(self.w))?;
        tape.add(y, params.var(self.b))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let y = self.pre_activation(tape, params, x)?;
        self.activation.apply(tape, y)
    }
}

/// Sequential stack of [`Linear`] layers.
#[derive(Clone, Debug, Default)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Hidden layers use `hidden`, the last layer uses `last`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            let act = if i + 1 == widths.len() { last } else { hidden };
            layers.push(Linear::new(store, &format!("{name}.{i}"), group, d, w, act, rng));
            d = w;
        }
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            x = l.forward(tape, params, x)?;
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim)
    }
}
