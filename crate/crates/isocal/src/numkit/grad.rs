//! Central finite differences, the gradient oracle for every analytic
//! gradient in the crate.

use crate::error::{Error, Result};

/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg("finite-difference step must be > 0".into()));
    }
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        point[i] = x[i] + eps;
        let fp = f(&point);
        point[i] = x[i] - eps;
        let fm = f(&point);
        point[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("f(x +/- eps*e_{i}) during finite differencing"),
            });
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest relative deviation between an analytic gradient and its
/// finite-difference estimate, scaled by the gradient magnitude.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs() / scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() <= 1e-8);
        assert!((g[1] - 4.0).abs() <= 1e-8);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let g = finite_diff_grad(|_| 3.5, &[0.2, -0.7, 9.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        // ln goes NaN below zero for coordinate 1.
        let f = |x: &[f64]| x[1].ln();
        let err = finite_diff_grad(f, &[1.0, 1e-9], 1e-5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("e_1"), "message was: {msg}");
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(finite_diff_grad(|_| 0.0, &[1.0], 0.0).is_err());
    }
}
