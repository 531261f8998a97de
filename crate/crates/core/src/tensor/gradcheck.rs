//! Central-difference verification of backward rules.

use super::Tensor;

/// Compares the recorded gradient of `f` (a scalar-valued tensor function)
/// against central finite differences at `data`, coordinate by coordinate.
/// Returns max |analytic − numeric| / max(1, |analytic|, |numeric|).
///
/// 64-bit only: at f32 precision the difference quotient itself loses too
/// many digits to certify anything.
pub fn finite_diff_check<F>(f: F, data: &[f64], shape: &[usize], eps: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    assert!(eps > 0.0 && eps <= 1e-2, "eps must be in (0, 1e-2]");
    let x = Tensor::param(data.to_vec(), shape.to_vec()).expect("valid shape");
    let loss = f(&x);
    assert_eq!(loss.len(), 1, "finite_diff_check needs a scalar-valued f");
    loss.backward().expect("backward on checked function");
    // f may not touch x at all; then the true gradient is zero everywhere.
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; data.len()]);

    let eval = |perturbed: Vec<f64>| -> f64 {
        let xp = Tensor::constant(perturbed, shape.to_vec()).expect("valid shape");
        f(&xp).item()
    };

    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let mut plus = data.to_vec();
        plus[i] += eps;
        let mut minus = data.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
