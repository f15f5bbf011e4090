//! Central-difference verification of analytic gradients.

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Coordinate where the maximum was attained.
    pub worst_index: usize,
}

/// Compares the backward-pass gradient of the scalar function `f` at `x`
/// against central differences with step `eps`.
///
/// `f` is called once on a gradient-tracking copy of `x` and `2·numel` times on
/// constant perturbed copies.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&Tensor) -> Tensor,
{
    let shape = x.shape().to_vec();
    let base = x.to_vec();

    let leaf = Tensor::param(shape.clone(), base.clone());
    let y = f(&leaf);
    if y.numel() != 1 {
        return Err(TensorError::NotScalar(y.shape().to_vec()));
    }
    if !y.item().is_finite() {
        return Err(TensorError::NonFinite { index: 0 });
    }
    let analytic = if y.requires_grad() {
        y.backward()?;
        leaf.grad().unwrap_or_else(|| vec![0.0; base.len()])
    } else {
        vec![0.0; base.len()]
    };

    let eval = |i: usize, delta: f64| -> Result<f64, TensorError> {
        let mut v = base.clone();
        v[i] += delta;
        let val = f(&Tensor::constant(shape.clone(), v)).item();
        if val.is_finite() {
            Ok(val)
        } else {
            Err(TensorError::NonFinite { index: i })
        }
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for (i, a) in analytic.iter().enumerate() {
        let numeric = (eval(i, eps)? - eval(i, -eps)?) / (2.0 * eps);
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        if rel > report.max_rel_error {
            report = GradCheck {
                max_rel_error: rel,
                worst_index: i,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::constant(vec![4], vec![0.3, -1.0, 2.0, 5.0]);
        let r = grad_check(|_| Tensor::scalar(7.0), &x, 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_value_reports_coordinate() {
        let x = Tensor::constant(vec![3], vec![1.0, 2.0, 1e-7]);
        let err = grad_check(|t| t.log().sum(), &x, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 2 }), "{err}");
    }
}
