//! Central-difference verification of tape gradients.

use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Backward rule to corrupt during the analytic pass (mutation testing).
    pub fault: Option<OpKind>,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            fault: None,
            max_coords_per_input: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Checks the gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    let report = grad_check_with(&opts, |tape, vars| f(tape, vars[0]), std::slice::from_ref(x))?;
    Ok(report.max_rel_error)
}

pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    grad_check_with(&opts, f, inputs)
}

pub fn grad_check_with<F>(opts: &GradCheckOptions, f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.inject_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.item(out)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    for (input, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let stride = match opts.max_coords_per_input {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for coord in (0..n).step_by(stride) {
            let orig = work[input].data()[coord];
            work[input].data_mut()[coord] = orig + opts.step;
            let plus = eval(&work)?;
            work[input].data_mut()[coord] = orig - opts.step;
            let minus = eval(&work)?;
            work[input].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[coord];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_input = input;
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}

/// Finite-difference Jacobian of a vector function, `J[i][j] = ∂out_i / ∂x_j`.
pub fn numerical_jacobian<F>(f: F, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut work = x.to_vec();
    let n_out = f(x)?.len();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    for j in 0..x.len() {
        let orig = work[j];
        work[j] = orig + step;
        let plus = f(&work)?;
        work[j] = orig - step;
        let minus = f(&work)?;
        work[j] = orig;
        for i in 0..n_out {
            jac[i][j] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[5], &mut rng);
        let x = Tensor::randn(&[5], &mut rng);
        let err = grad_check(
            |tape, x| {
                let w = tape.constant(w.clone());
                let p = tape.mul(w, x)?;
                tape.sum(p, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_of_affine_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[3, 4], &mut rng);
        let x = Tensor::randn(&[2, 4], &mut rng);
        let err = grad_check_many(
            |tape, v| {
                let y = tape.matmul_nt(v[1], v[0])?;
                let s = tape.sigmoid(y)?;
                tape.sum(s, None)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err.max_rel_error <= 1e-6, "{err:?}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[3, 4], &mut rng);
        let x = Tensor::randn(&[2, 4], &mut rng);
        let opts = GradCheckOptions {
            fault: Some(OpKind::Sigmoid),
            ..Default::default()
        };
        let report = grad_check_with(
            &opts,
            |tape, v| {
                let y = tape.matmul_nt(v[1], v[0])?;
                let s = tape.sigmoid(y)?;
                tape.sum(s, None)
            },
            &[w, x],
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn jacobian_of_linear_map() {
        let jac = numerical_jacobian(|x| Ok(vec![2.0 * x[0] + x[1], -x[1]]), &[0.3, 0.7], 1e-5).unwrap();
        assert!((jac[0][0] - 2.0).abs() < 1e-9);
        assert!((jac[0][1] - 1.0).abs() < 1e-9);
        assert!(jac[1][0].abs() < 1e-12);
        assert!((jac[1][1] + 1.0).abs() < 1e-9);
    }
}
