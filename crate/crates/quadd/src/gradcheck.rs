//! Finite-difference gradient checking.
//!
//! Central differences give an oracle that is independent of the autodiff
//! tape and of every surrogate backward rule; the suite in `tests/` uses it
//! to validate each gradient formula.

/// Central finite differences of a scalar function at `x`.
pub fn central_diff<F>(f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Relative error of one component pair, with an absolute floor below the
/// resolving power of central differences.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if (a - b).abs() < 1e-7 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest componentwise relative error between two gradient vectors.
pub fn max_component_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
