//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

/// Compare an analytic gradient against central finite differences of `f`
/// at `x`, returning the worst relative error over coordinates:
///
/// `max_k |analytic_k − central_k| / max(1e-12, |central_k|)`
///
/// The caller must pick `x` away from nondifferentiable points (relu kinks);
/// a kink inside the `±step` window invalidates the central estimate there.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    x: &[f64],
    step: f64,
) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(Error::contract(format!(
            "gradient length {} does not match point length {}",
            analytic.len(),
            x.len()
        )));
    }
    if !(step > 0.0) {
        return Err(Error::contract("step must be positive"));
    }
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let up = f(&probe);
        probe[k] = x[k] - step;
        let down = f(&probe);
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated non-finite near coordinate {k}"
            )));
        }
        let central = (up - down) / (2.0 * step);
        let rel = (analytic[k] - central).abs() / central.abs().max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Central-difference gradient of `f` at `x` (test oracle helper).
pub fn central_diff_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + step;
        let up = f(&probe);
        probe[k] = x[k] - step;
        let down = f(&probe);
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated non-finite near coordinate {k}"
            )));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_checks_at_machine_precision() {
        let coeffs = [2.0, -3.5, 0.25];
        let f = |x: &[f64]| x.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum();
        let err = grad_check(f, &coeffs, &[0.3, -1.2, 4.0], 1e-5).unwrap();
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn sigmoid_composition_checks_below_1e6() {
        use crate::diffcore::tape::stable_sigmoid;
        let f = |x: &[f64]| stable_sigmoid(stable_sigmoid(x[0]) + x[1]);
        let x = [0.4, -0.9];
        // analytic: s0 = σ(x0); y = σ(s0 + x1); dy/dx0 = y(1-y)·s0(1-s0); dy/dx1 = y(1-y)
        let s0 = stable_sigmoid(x[0]);
        let y = stable_sigmoid(s0 + x[1]);
        let analytic = [y * (1.0 - y) * s0 * (1.0 - s0), y * (1.0 - y)];
        let err = grad_check(f, &analytic, &x, 1e-5).unwrap();
        assert!(err < 1e-6, "sigmoid composition error {err}");
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        // The downward probe crosses zero, so ln evaluates to NaN.
        let f = |x: &[f64]| x[0].ln();
        assert!(matches!(
            grad_check(f, &[1e6], &[1e-6], 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let f = |_: &[f64]| 0.0;
        assert!(grad_check(f, &[0.0, 0.0], &[0.0], 1e-5).is_err());
    }
}
