//! Central finite-difference probes.
//!
//! These only ever *evaluate* a loss; they share no code with the analytic
//! backward passes they are used to check.

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: &F, params: &[f64], h: f64) -> Vec<f64> {
    let mut work = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Max over components of |a - b| / max(|a|, |b|, floor).
///
/// The floor keeps near-zero gradients from blowing up the ratio; 1.0 is the
/// conventional choice for loss-scale gradients.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
