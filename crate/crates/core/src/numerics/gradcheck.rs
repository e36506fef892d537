use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// `loss` returns the scalar value and its analytic gradient at the given
/// point. The result is the maximum over coordinates of
/// `|analytic − central| / max(|analytic|, |central|, 1e-12)`.
pub fn check_gradient<F>(mut loss: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let (value, analytic) = loss(params);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }

    let mut point = params.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..point.len() {
        let orig = point[i];
        point[i] = orig + step;
        let (plus, _) = loss(&point);
        point[i] = orig - step;
        let (minus, _) = loss(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss near coordinate {i}")));
        }
        let central = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(central.abs()).max(1e-12);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic() {
        let err = check_gradient(
            |x| (0.5 * (x[0] * x[0] + x[1] * x[1]), vec![x[0], x[1]]),
            &[3.0, 4.0],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn constant_loss() {
        let err = check_gradient(|_| (2.5, vec![0.0, 0.0, 0.0]), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = check_gradient(|x| (x[0] * x[0], vec![x[0]]), &[2.0], 1e-5).unwrap();
        assert!(err > 0.4);
    }

    #[test]
    fn non_finite_loss_errors() {
        let r = check_gradient(|x| (1.0 / x[0], vec![-1.0 / (x[0] * x[0])]), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
