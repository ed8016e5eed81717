//! Central finite differences — the independent oracle for every gradient
//! check in the crate. Deliberately knows nothing about the tape.

use crate::error::{Error, Result};

use super::Tensor;

/// Per-coordinate central difference `(f(x+h) - f(x-h)) / 2h`.
///
/// `loss_fn` must be pure; a non-finite loss at any probe point is a
/// numeric error.
pub fn finite_diff<F>(loss_fn: F, param: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite_diff step must be positive, got {step}")));
    }
    let mut probe = param.clone();
    let mut grad = vec![0.0; param.len()];
    for i in 0..param.len() {
        let original = probe.data()[i];

        probe.data_mut()[i] = original + step;
        let plus = loss_fn(&probe)?;
        probe.data_mut()[i] = original - step;
        let minus = loss_fn(&probe)?;
        probe.data_mut()[i] = original;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at finite-difference probe of coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(Tensor::new_unchecked(param.shape().to_vec(), grad))
}

/// Largest relative discrepancy between two gradients, with the
/// denominator floored to keep near-zero entries from dominating.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::from_vec(&[2, 2], vec![0.3, -1.0, 2.0, 5.5]).unwrap();
        let g = finite_diff(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_matches_analytic_derivative() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff(|t| Ok(t.sq_sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        // ln at the negative probe point is NaN.
        let x = Tensor::scalar(0.0);
        let r = finite_diff(|t| Ok(t.data()[0].ln()), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
