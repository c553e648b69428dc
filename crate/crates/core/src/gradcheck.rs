//! Central finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Relative error with a floor so zero gradients compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with the given step.
///
/// `f` builds a scalar from the given input value on a fresh graph. It must
/// be deterministic; two forward evaluations that disagree are rejected.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Value) -> Result<Value>,
{
    if !x.all_finite() {
        return Err(Error::invalid("grad_check", "input has non-finite entries"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let mut t = t.clone();
        t.requires_grad = false;
        t.grad = None;
        let v = g.input(t);
        let out = f(&mut g, v)?;
        if g.value(out).len() != 1 {
            return Err(Error::invalid("grad_check", format!("f must be scalar, got {:?}", g.shape(out))));
        }
        Ok(g.value(out).data()[0])
    };

    let y0 = eval(x)?;
    let y1 = eval(x)?;
    if y0.to_bits() != y1.to_bits() {
        return Err(Error::invalid(
            "grad_check",
            format!("f is not deterministic: {} vs {}", y0, y1),
        ));
    }

    // analytic pass
    let mut g = Graph::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    leaf.grad = None;
    let v = g.input(leaf);
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        max_err = max_err.max(relative_error(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Finite-difference check of dLoss/dParam for selected (param, element)
/// coordinates of a parameter store. `f` evaluates the scalar loss from the
/// store; the analytic gradients must already be accumulated in the store's
/// grad buffers for the same loss.
pub fn grad_check_params<F>(
    params: &mut ParamStore,
    coords: &[(usize, usize)],
    step: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut ParamStore) -> Result<f64>,
{
    let mut max_err: f64 = 0.0;
    for &(pi, ei) in coords {
        let analytic = params
            .entry(pi)
            .value
            .grad
            .as_ref()
            .map(|g| g[ei])
            .unwrap_or(0.0);
        let orig = params.entry(pi).value.data()[ei];
        params.entry_mut(pi).value.data_mut()[ei] = orig + step;
        let plus = f(params)?;
        params.entry_mut(pi).value.data_mut()[ei] = orig - step;
        let minus = f(params)?;
        params.entry_mut(pi).value.data_mut()[ei] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        max_err = max_err.max(relative_error(analytic, numeric));
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sigmoid_sum_checks_out() {
        let mut rng = Rng::seed_from(5);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let s = g.sigmoid(v);
                Ok(g.sum_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn relu_away_from_zero_checks_out() {
        let mut rng = Rng::seed_from(6);
        // keep entries away from the kink
        let mut x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 0.1 {
                *v += 0.5;
            }
        }
        let err = grad_check(
            |g, v| {
                let r = g.relu(v);
                Ok(g.sum_all(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {}", err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::ones(&[4]);
        let err = grad_check(
            |g, _v| {
                let c = g.scalar(3.0);
                Ok(g.affine(c, 1.0, 0.0))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterministic_f_is_rejected() {
        use std::cell::Cell;
        let count = Cell::new(0.0f64);
        let x = Tensor::ones(&[2]);
        let res = grad_check(
            |g, _v| {
                count.set(count.get() + 1.0);
                Ok(g.scalar(count.get()))
            },
            &x,
            1e-5,
        );
        assert!(res.is_err());
    }
}
