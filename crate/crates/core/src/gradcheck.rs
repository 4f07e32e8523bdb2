//! Central finite differences for verifying analytic gradients.
//!
//! The differencing here never touches backward-pass code: it only evaluates
//! a scalar function at perturbed points, so it is an independent oracle for
//! any gradient the crate computes.

/// Central-difference derivative of `f` w.r.t. one coordinate of `point`.
pub fn central_diff<F>(f: &mut F, point: &[f64], index: usize, step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut plus = point.to_vec();
    let mut minus = point.to_vec();
    plus[index] += step;
    minus[index] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

/// Full numerical gradient of `f` at `point`.
pub fn numerical_gradient<F>(f: &mut F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..point.len()).map(|i| central_diff(f, point, i, step)).collect()
}

/// Relative error between two gradient vectors:
/// ||a - b||_2 / max(||a||_2, ||b||_2, floor).
pub fn relative_error(analytic: &[f64], numerical: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numerical.len());
    let diff: f64 = analytic
        .iter()
        .zip(numerical)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numerical.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}
