use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Bias-corrected Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| vec![0.0; store.get(*id).value.numel()])
            .collect();
        Adam {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            ids,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores saved moments; lengths must match the tracked parameters.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update with learning rate `lr` using the stored gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for id in &self.ids {
            let p = store.get(*id);
            match &p.grad {
                None => {
                    return Err(Error::Contract(format!("parameter '{}' has no gradient", p.name)))
                }
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::Contract(format!(
                        "gradient of '{}' has shape {:?}, parameter is {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, id) in self.ids.iter().enumerate() {
            let p = store.get_mut(*id);
            let g = p.grad.as_ref().expect("checked above").data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::ParamGroup;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", ParamGroup::Encoder, Tensor::vector(vec![value, -value]));
        (store, id)
    }

    #[test]
    fn zero_gradient_is_noop_except_counter() {
        let (mut store, id) = single(1.5);
        let mut adam = Adam::new(&store, vec![id]);
        store.get_mut(id).grad = Some(Tensor::zeros(&[2]));
        adam.step(&mut store, 1e-3).unwrap();
        assert_eq!(store.get(id).value.data(), &[1.5, -1.5]);
        assert_eq!(adam.moments().0[0], vec![0.0, 0.0]);
        assert_eq!(adam.moments().1[0], vec![0.0, 0.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(&store, vec![id]);
        store.get_mut(id).grad = Some(Tensor::vector(vec![0.3, -7.0]));
        adam.step(&mut store, 0.01).unwrap();
        let v = store.get(id).value.data();
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps)
        assert!((v[0] + 0.01).abs() < 1e-9, "{v:?}");
        assert!((v[1] - 0.01).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut store, id) = single(2.0);
        let mut adam = Adam::new(&store, vec![id]);
        store.get_mut(id).grad = Some(Tensor::vector(vec![1.0, 1.0]));
        adam.step(&mut store, 0.0).unwrap();
        assert_eq!(store.get(id).value.data(), &[2.0, -2.0]);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let (mut store, id) = single(1.0);
        let mut adam = Adam::new(&store, vec![id]);
        assert!(matches!(adam.step(&mut store, 0.1), Err(Error::Contract(_))));
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn identical_streams_identical_trajectories() {
        let run = || {
            let (mut store, id) = single(0.5);
            let mut adam = Adam::new(&store, vec![id]);
            let mut out = Vec::new();
            for k in 0..50 {
                let g = (k as f64 * 0.7).sin();
                store.get_mut(id).grad = Some(Tensor::vector(vec![g, g * g]));
                adam.step(&mut store, 0.01).unwrap();
                out.extend(store.get(id).value.data().iter().map(|v| v.to_bits()));
            }
            out
        };
        assert_eq!(run(), run());
    }
}
