//! Masked autoregressive network producing per-coordinate shift and scale
//! pre-activations.
//!
//! Each latent coordinate `j` carries a degree in `1..=d`. Output `i` may only
//! see inputs of strictly smaller degree; the context vector is unmasked and
//! feeds every layer.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Bound, ParamGroup, ParamId, ParamStore};

/// Coordinate ordering used to assign input degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ordering {
    Natural,
    Reversed,
}

impl Ordering {
    pub fn degrees(self, d: usize) -> Vec<usize> {
        match self {
            Ordering::Natural => (1..=d).collect(),
            Ordering::Reversed => (1..=d).rev().collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MaskedLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub ctx: Option<ParamId>,
    pub mask: Tensor,
}

impl MaskedLinear {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        mask: Tensor,
        context_dim: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Self {
        let (out_dim, in_dim) = (mask.shape()[0], mask.shape()[1]);
        let init = |rows, cols, rng: &mut R| {
            if zero_init {
                Tensor::zeros(&[rows, cols])
            } else {
                xavier_uniform(rows, cols, rng)
            }
        };
        let w = store.register(format!("{name}.w"), group, init(out_dim, in_dim, rng));
        let ctx = (context_dim > 0)
            .then(|| store.register(format!("{name}.ctx"), group, init(out_dim, context_dim, rng)));
        let b = store.register(format!("{name}.b"), group, Tensor::zeros(&[out_dim]));
        MaskedLinear {
            w,
            b,
            ctx,
            mask,
        }
    }

    fn forward(&self, tape: &mut Tape, params: &Bound, x: Var, h: Var) -> Result<Var> {
        let mask = tape.constant(self.mask.clone());
        let w = tape.mul(params.var(self.w), mask)?;
        let mut y = tape.matmul_nt(x, w)?;
        if let Some(c) = self.ctx {
            let hc = tape.matmul_nt(h, params.var(c))?;
            y = tape.add(y, hc)?;
        }
        tape.add(y, params.var(self.b))
    }
}

/// MADE with ReLU hidden layers and two linear heads.
#[derive(Clone, Debug)]
pub struct MadeNetwork {
    pub latent_dim: usize,
    pub context_dim: usize,
    input_degrees: Vec<usize>,
    hidden: Vec<MaskedLinear>,
    shift_head: MaskedLinear,
    scale_head: MaskedLinear,
}

fn hidden_degrees(width: usize, d: usize) -> Vec<usize> {
    let span = d.saturating_sub(1).max(1);
    (0..width).map(|k| k % span + 1).collect()
}

fn mask(out_deg: &[usize], in_deg: &[usize], strict: bool) -> Tensor {
    let mut m = Tensor::zeros(&[out_deg.len(), in_deg.len()]);
    let cols = in_deg.len();
    for (i, &o) in out_deg.iter().enumerate() {
        for (j, &k) in in_deg.iter().enumerate() {
            let on = if strict { o > k } else { o >= k };
            if on {
                m.data_mut()[i * cols + j] = 1.0;
            }
        }
    }
    m
}

impl MadeNetwork {
    /// Both heads start at zero, so a fresh step rescales every coordinate
    /// by `sigmoid(gate_bias)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        latent_dim: usize,
        context_dim: usize,
        hidden_widths: &[usize],
        ordering: Ordering,
        rng: &mut R,
    ) -> Self {
        let input_degrees = ordering.degrees(latent_dim);
        let mut prev = input_degrees.clone();
        let mut hidden = Vec::with_capacity(hidden_widths.len());
        for (l, &w) in hidden_widths.iter().enumerate() {
            let deg = hidden_degrees(w, latent_dim);
            hidden.push(MaskedLinear::new(
                store,
                &format!("{name}.h{l}"),
                group,
                mask(&deg, &prev, false),
                context_dim,
                false,
                rng,
            ));
            prev = deg;
        }
        // Without hidden layers the heads read the inputs directly and need
        // the strict mask against input degrees.
        let out_mask = mask(&input_degrees, &prev, true);
        let shift_head = MaskedLinear::new(
            store,
            &format!("{name}.m"),
            group,
            out_mask.clone(),
            context_dim,
            true,
            rng,
        );
        let scale_head = MaskedLinear::new(
            store,
            &format!("{name}.s"),
            group,
            out_mask,
            context_dim,
            true,
            rng,
        );
        MadeNetwork {
            latent_dim,
            context_dim,
            input_degrees,
            hidden,
            shift_head,
            scale_head,
        }
    }

    pub fn input_degrees(&self) -> &[usize] {
        &self.input_degrees
    }

    /// All parameters owned by this network.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.hidden.iter().chain([&self.shift_head, &self.scale_head]) {
            ids.push(l.w);
            ids.extend(l.ctx);
            ids.push(l.b);
        }
        ids
    }

    /// Returns the shift `m` and pre-gate scale `s`, each `[batch, latent_dim]`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, v: Var, h: Var) -> Result<(Var, Var)> {
        let sv = tape.shape(v).to_vec();
        let sh = tape.shape(h).to_vec();
        if sv.len() != 2 || sv[1] != self.latent_dim {
            return Err(Error::dim(
                "made_forward",
                format!("input {:?} does not match latent width {}", sv, self.latent_dim),
            ));
        }
        if sh.len() != 2 || sh[1] != self.context_dim || sh[0] != sv[0] {
            return Err(Error::dim(
                "made_forward",
                format!(
                    "context {:?} does not match [{}, {}]",
                    sh, sv[0], self.context_dim
                ),
            ));
        }
        let mut x = v;
        for l in &self.hidden {
            let y = l.forward(tape, params, x, h)?;
            x = tape.relu(y)?;
        }
        let m = self.shift_head.forward(tape, params, x, h)?;
        let s = self.scale_head.forward(tape, params, x, h)?;
        Ok((m, s))
    }

    #[cfg(test)]
    pub(crate) fn layers(&self) -> impl Iterator<Item = &MaskedLinear> {
        self.hidden.iter().chain([&self.shift_head, &self.scale_head])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degrees_follow_ordering() {
        assert_eq!(Ordering::Natural.degrees(3), vec![1, 2, 3]);
        assert_eq!(Ordering::Reversed.degrees(3), vec![3, 2, 1]);
    }

    #[test]
    fn first_degree_outputs_have_no_input_connections() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let made = MadeNetwork::new(
            &mut store,
            "made",
            ParamGroup::Encoder,
            4,
            2,
            &[8, 8],
            Ordering::Natural,
            &mut rng,
        );
        let head = &made.scale_head;
        let cols = head.mask.shape()[1];
        assert!(head.mask.data()[..cols].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_bias_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let made = MadeNetwork::new(
            &mut store,
            "made",
            ParamGroup::Encoder,
            3,
            2,
            &[6],
            Ordering::Natural,
            &mut rng,
        );
        for l in made.layers() {
            let shape = store.get(l.w).value.shape().to_vec();
            store.get_mut(l.w).value = Tensor::zeros(&shape);
            if let Some(c) = l.ctx {
                let shape = store.get(c).value.shape().to_vec();
                store.get_mut(c).value = Tensor::zeros(&shape);
            }
        }
        store.get_mut(made.shift_head.b).value = Tensor::vector(vec![0.1, 0.2, 0.3]);
        store.get_mut(made.scale_head.b).value = Tensor::vector(vec![-1.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let v = tape.constant(Tensor::randn(&[2, 3], &mut rng));
        let h = tape.constant(Tensor::randn(&[2, 2], &mut rng));
        let (m, s) = made.forward(&mut tape, &bound, v, h).unwrap();
        assert_eq!(tape.value(m).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        assert_eq!(tape.value(s).data(), &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn wrong_widths_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let made = MadeNetwork::new(
            &mut store,
            "made",
            ParamGroup::Encoder,
            3,
            2,
            &[6],
            Ordering::Natural,
            &mut rng,
        );
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let v = tape.constant(Tensor::zeros(&[2, 4]));
        let h = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(made.forward(&mut tape, &bound, v, h).is_err());
        let v = tape.constant(Tensor::zeros(&[2, 3]));
        let h = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(made.forward(&mut tape, &bound, v, h).is_err());
    }
}
