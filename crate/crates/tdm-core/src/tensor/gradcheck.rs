//! Central finite differences, the independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: super::Graph::backward

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function with respect to every
/// element of every parameter tensor:
/// `(f(p + eps·e_i) - f(p - eps·e_i)) / (2·eps)`.
///
/// `f` must be deterministic. Probing stops with [`Error::NonFiniteValue`]
/// the first time `f` returns NaN or infinity.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    let mut flat_index = 0;
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe[p].data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe[p].data_mut()[i] = orig;
            for value in [plus, minus] {
                if !value.is_finite() {
                    return Err(Error::NonFiniteValue {
                        index: flat_index,
                        value,
                    });
                }
            }
            *gi = (plus - minus) / (2.0 * eps);
            flat_index += 1;
        }
        grads.push(Tensor::new(params[p].shape().to_vec(), g)?);
    }
    Ok(grads)
}

/// Relative disagreement between an analytic and a numeric derivative,
/// `|a - n| / max(|a|, |n|)` (0 when both vanish).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Acceptance rule for one gradient element: relative error below `rel_tol`,
/// or absolute error below `abs_tol` where the numeric gradient is smaller
/// than `small`.
pub fn gradient_agrees(analytic: f64, numeric: f64, rel_tol: f64, abs_tol: f64, small: f64) -> bool {
    relative_error(analytic, numeric) < rel_tol || (numeric.abs() < small && (analytic - numeric).abs() < abs_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let g = finite_diff_grad(|p| p[0].data()[0].tanh(), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert!((g[0].data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn non_finite_is_reported() {
        let err = finite_diff_grad(|p| p[0].data()[0].ln(), &[Tensor::scalar(0.0)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { index: 0, .. }));
    }
}
