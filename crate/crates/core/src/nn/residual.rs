use rand::Rng;

use super::linear::{Activation, Linear};
use super::params::{Bound, ParamGroup, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// `f_in(x) + x`, or `f_in(x) + P·x` when the widths differ.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub inner: Vec<Linear>,
    pub projection: Option<Linear>,
}

impl ResidualBlock {
    /// Single ReLU layer on the deep path; a linear projection on the skip
    /// path only when `in_dim != out_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let inner = vec![Linear::new(
            store,
            &format!("{name}.inner"),
            group,
            in_dim,
            out_dim,
            Activation::Relu,
            rng,
        )];
        let projection = (in_dim != out_dim).then(|| {
            Linear::new(
                store,
                &format!("{name}.skip"),
                group,
                in_dim,
                out_dim,
                Activation::Identity,
                rng,
            )
        });
        ResidualBlock { inner, projection }
    }

    pub fn from_parts(inner: Vec<Linear>, projection: Option<Linear>) -> Result<Self> {
        let (Some(first), Some(last)) = (inner.first(), inner.last()) else {
            return Err(Error::Config("residual block needs an inner layer".into()));
        };
        for pair in inner.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "inner widths do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        let (din, dout) = (first.in_dim, last.out_dim);
        match &projection {
            None if din != dout => Err(Error::Config(format!(
                "residual block maps {din} -> {dout} without a skip projection"
            ))),
            Some(p) if p.in_dim != din || p.out_dim != dout => Err(Error::Config(format!(
                "skip projection {} -> {} does not match block {din} -> {dout}",
                p.in_dim, p.out_dim
            ))),
            _ => Ok(ResidualBlock { inner, projection }),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.inner[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.inner[self.inner.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.inner {
            h = l.forward(tape, params, h)?;
        }
        let skip = match &self.projection {
            Some(p) => p.forward(tape, params, x)?,
            None => x,
        };
        tape.add(h, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_inner_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "r", ParamGroup::Generator, 5, 5, &mut rng);
        assert!(block.projection.is_none());
        let w = block.inner[0].w;
        store.get_mut(w).value = Tensor::zeros(&[5, 5]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::randn(&[3, 5], &mut rng));
        let y = block.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn mismatched_widths_need_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let inner = Linear::new(&mut store, "i", ParamGroup::Generator, 4, 6, Activation::Relu, &mut rng);
        assert!(matches!(
            ResidualBlock::from_parts(vec![inner.clone()], None),
            Err(Error::Config(_))
        ));
        let proj = Linear::new(&mut store, "p", ParamGroup::Generator, 4, 6, Activation::Identity, &mut rng);
        assert!(ResidualBlock::from_parts(vec![inner], Some(proj)).is_ok());
    }

    #[test]
    fn skip_path_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "r", ParamGroup::Generator, 4, 4, &mut rng);
        let x = Tensor::randn(&[3, 4], &mut rng);
        let err = grad_check(
            |tape, x| {
                let bound = store.bind_constant(tape);
                let y = block.forward(tape, &bound, x)?;
                let s = tape.square(y)?;
                tape.sum(s, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
