//! Tanh-squashed diagonal-Gaussian action distributions.
//!
//! Shared by the forward (SAC) policy and the backward policy. The density
//! carries the change-of-variables correction `log(scale * (1 - tanh(u)^2))`
//! per dimension, evaluated in the numerically stable form
//! `2 (ln 2 - u - softplus(-2u))`.

use crate::error::{Error, Result};
use crate::nn::gaussian::softplus;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Box action bounds with the affine map from tanh space.
#[derive(Debug, Clone)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub scale: Vec<f64>,
    pub center: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: &[f64], high: &[f64]) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(Error::invalid_input("action bounds must be nonempty and equal length"));
        }
        if low.iter().zip(high.iter()).any(|(l, h)| !(l < h)) {
            return Err(Error::invalid_input("action bounds must satisfy low < high"));
        }
        Ok(ActionBounds {
            scale: low.iter().zip(high.iter()).map(|(l, h)| (h - l) / 2.0).collect(),
            center: low.iter().zip(high.iter()).map(|(l, h)| (h + l) / 2.0).collect(),
            low: low.to_vec(),
            high: high.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }
}

/// A reparameterized draw with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub u: Vec<f64>,
    pub tanh_u: Vec<f64>,
    pub eps: Vec<f64>,
    pub std: Vec<f64>,
}

/// log of the squash correction per dim: `-log(scale (1 - tanh(u)^2))`.
#[inline]
fn neg_log_correction(u: f64, scale: f64) -> f64 {
    -(scale.ln()) - 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Draw `a = center + scale * tanh(mean + std * eps)` and its log-density.
pub fn sample_squashed(mean: &[f64], log_std: &[f64], eps: &[f64], bounds: &ActionBounds) -> SquashedSample {
    let d = mean.len();
    let mut out = SquashedSample {
        action: Vec::with_capacity(d),
        log_prob: 0.0,
        u: Vec::with_capacity(d),
        tanh_u: Vec::with_capacity(d),
        eps: eps.to_vec(),
        std: Vec::with_capacity(d),
    };
    for i in 0..d {
        let std = log_std[i].exp();
        let u = mean[i] + std * eps[i];
        let t = u.tanh();
        out.action.push(bounds.center[i] + bounds.scale[i] * t);
        out.log_prob += -HALF_LOG_2PI - log_std[i] - 0.5 * eps[i] * eps[i] + neg_log_correction(u, bounds.scale[i]);
        out.u.push(u);
        out.tanh_u.push(t);
        out.std.push(std);
    }
    out
}

/// Mode of the squashed distribution.
pub fn deterministic_action(mean: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    mean.iter()
        .enumerate()
        .map(|(i, &m)| bounds.center[i] + bounds.scale[i] * m.tanh())
        .collect()
}

/// Log-density of a *given* in-bounds action (inverse-tanh path).
pub fn log_prob_of_action(mean: &[f64], log_std: &[f64], action: &[f64], bounds: &ActionBounds) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let t = ((action[i] - bounds.center[i]) / bounds.scale[i]).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
        let u = t.atanh();
        let z = (u - mean[i]) / log_std[i].exp();
        lp += -HALF_LOG_2PI - log_std[i] - 0.5 * z * z + neg_log_correction(u, bounds.scale[i]);
    }
    lp
}

/// Chain upstream gradients `(dL/da, dL/dlogp)` through a reparameterized
/// sample onto `(mean, log_std)`. Accumulates into the output slices.
pub fn backprop_sample(
    sample: &SquashedSample,
    bounds: &ActionBounds,
    d_action: &[f64],
    d_log_prob: f64,
    d_mean: &mut [f64],
    d_log_std: &mut [f64],
) {
    for i in 0..sample.u.len() {
        let t = sample.tanh_u[i];
        let da_du = bounds.scale[i] * (1.0 - t * t);
        // u-dependence of logp comes only from the correction term
        let dlogp_du = 2.0 * t;
        let d_u = d_action[i] * da_du + d_log_prob * dlogp_du;
        d_mean[i] += d_u;
        d_log_std[i] += d_u * sample.std[i] * sample.eps[i] - d_log_prob;
    }
}

/// Gradient of `log_prob_of_action` with respect to `(mean, log_std)` for a
/// fixed action. Accumulates into the output slices.
pub fn grad_log_prob_fixed_action(
    mean: &[f64],
    log_std: &[f64],
    action: &[f64],
    bounds: &ActionBounds,
    d_mean: &mut [f64],
    d_log_std: &mut [f64],
) {
    for i in 0..mean.len() {
        let t = ((action[i] - bounds.center[i]) / bounds.scale[i]).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
        let u = t.atanh();
        let z = (u - mean[i]) / log_std[i].exp();
        d_mean[i] += z / log_std[i].exp();
        d_log_std[i] += z * z - 1.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn bounds_1d() -> ActionBounds {
        ActionBounds::new(&[-2.0], &[2.0]).unwrap()
    }

    #[test]
    fn samples_respect_bounds() {
        let b = ActionBounds::new(&[-2.0, 0.0], &[2.0, 1.0]).unwrap();
        let mut rng = substream(0, "squash-bounds", 0);
        for _ in 0..200 {
            let mean = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let log_std = vec![rng.random_range(-2.0..1.0), rng.random_range(-2.0..1.0)];
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let s = sample_squashed(&mean, &log_std, &eps, &b);
            for i in 0..2 {
                assert!(s.action[i] > b.low[i] && s.action[i] < b.high[i]);
            }
        }
    }

    #[test]
    fn density_normalizes_to_one_in_1d() {
        // Trapezoid quadrature of exp(logp) over the action interval.
        let b = bounds_1d();
        let mean = [0.4];
        let log_std = [-0.3];
        let n = 4001;
        let lo = -2.0 + 1e-9;
        let hi = 2.0 - 1e-9;
        let h = (hi - lo) / (n - 1) as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let a = lo + i as f64 * h;
            let p = log_prob_of_action(&mean, &log_std, &[a], &b).exp();
            integral += if i == 0 || i == n - 1 { 0.5 * p } else { p } * h;
        }
        assert!((integral - 1.0).abs() < 0.02, "integral = {integral}");
    }

    #[test]
    fn sample_and_fixed_action_densities_agree() {
        let b = bounds_1d();
        let mean = [0.2];
        let log_std = [-0.5];
        let eps = [0.7];
        let s = sample_squashed(&mean, &log_std, &eps, &b);
        let lp = log_prob_of_action(&mean, &log_std, &s.action, &b);
        assert!((s.log_prob - lp).abs() < 1e-9, "{} vs {lp}", s.log_prob);
    }

    #[test]
    fn backprop_sample_matches_finite_differences() {
        let b = bounds_1d();
        let eps = [0.6];
        // scalar probe: L = 3 * a + 0.5 * logp
        let loss = |mean: f64, log_std: f64| {
            let s = sample_squashed(&[mean], &[log_std], &eps, &b);
            3.0 * s.action[0] + 0.5 * s.log_prob
        };
        let (m0, l0) = (0.3, -0.4);
        let h = 1e-6;
        let fd_mean = (loss(m0 + h, l0) - loss(m0 - h, l0)) / (2.0 * h);
        let fd_ls = (loss(m0, l0 + h) - loss(m0, l0 - h)) / (2.0 * h);
        let s = sample_squashed(&[m0], &[l0], &eps, &b);
        let mut d_mean = vec![0.0];
        let mut d_ls = vec![0.0];
        backprop_sample(&s, &b, &[3.0], 0.5, &mut d_mean, &mut d_ls);
        assert!((d_mean[0] - fd_mean).abs() < 1e-6, "{} vs {fd_mean}", d_mean[0]);
        assert!((d_ls[0] - fd_ls).abs() < 1e-6, "{} vs {fd_ls}", d_ls[0]);
    }

    #[test]
    fn fixed_action_gradient_matches_finite_differences() {
        let b = bounds_1d();
        let action = [0.9];
        let loss = |mean: f64, log_std: f64| log_prob_of_action(&[mean], &[log_std], &action, &b);
        let (m0, l0) = (-0.2, -0.1);
        let h = 1e-6;
        let fd_mean = (loss(m0 + h, l0) - loss(m0 - h, l0)) / (2.0 * h);
        let fd_ls = (loss(m0, l0 + h) - loss(m0, l0 - h)) / (2.0 * h);
        let mut d_mean = vec![0.0];
        let mut d_ls = vec![0.0];
        grad_log_prob_fixed_action(&[m0], &[l0], &action, &b, &mut d_mean, &mut d_ls);
        assert!((d_mean[0] - fd_mean).abs() < 1e-6);
        assert!((d_ls[0] - fd_ls).abs() < 1e-6);
    }
}
