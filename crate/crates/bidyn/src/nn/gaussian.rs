//! Diagonal-Gaussian output heads and their likelihood terms.
//!
//! A head splits an MLP's output into a mean half and a raw log-variance
//! half; the raw log-variance is saturated smoothly into `[min, max]` so the
//! likelihood can never collapse, while staying differentiable everywhere.

use crate::error::{Error, Result};
use crate::nn::mlp::{Mlp, MlpCache, MlpSpec};
use rand::Rng;
use rand_distr::StandardNormal;

/// Numerically stable ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smoothly saturate `raw` into `(min, max)`; returns the bounded value and
/// its derivative with respect to `raw`.
#[inline]
pub fn soft_bound(raw: f64, min: f64, max: f64) -> (f64, f64) {
    let u = max - softplus(max - raw);
    let bounded = min + softplus(u - min);
    let d = sigmoid(max - raw) * sigmoid(u - min);
    (bounded, d)
}

/// Mean and diagonal log-variance of a Gaussian prediction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Per-sample negative log-likelihood core:
/// `(mean - target)' diag(e^{-lv}) (mean - target) + sum(lv)`
/// i.e. the Mahalanobis term plus the log-determinant term, no constants.
pub fn gaussian_nll(pred: &GaussianPrediction, target: &[f64]) -> Result<f64> {
    if pred.mean.len() != target.len() || pred.log_var.len() != target.len() {
        return Err(Error::invalid_input(format!(
            "gaussian_nll dims: mean {}, log_var {}, target {}",
            pred.mean.len(),
            pred.log_var.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for i in 0..target.len() {
        let diff = pred.mean[i] - target[i];
        acc += diff * diff * (-pred.log_var[i]).exp() + pred.log_var[i];
    }
    Ok(acc)
}

/// Gradients of [`gaussian_nll`] with respect to the mean and log-variance.
pub fn gaussian_nll_grad(pred: &GaussianPrediction, target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = target.len();
    let mut d_mean = vec![0.0; n];
    let mut d_lv = vec![0.0; n];
    for i in 0..n {
        let diff = pred.mean[i] - target[i];
        let inv_var = (-pred.log_var[i]).exp();
        d_mean[i] = 2.0 * diff * inv_var;
        d_lv[i] = 1.0 - diff * diff * inv_var;
    }
    (d_mean, d_lv)
}

/// An MLP whose output layer parameterizes a diagonal Gaussian over `dim`
/// targets: the first `dim` outputs are the mean, the rest raw log-variances.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    net: Mlp,
    dim: usize,
    pub log_var_min: f64,
    pub log_var_max: f64,
}

/// Forward cache plus the saturation slopes needed for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct GaussianCache {
    pub mlp: MlpCache,
    pub pred: GaussianPrediction,
    lv_slope: Vec<f64>,
}

impl GaussianHead {
    pub fn init<R: Rng>(
        input_dim: usize,
        target_dim: usize,
        hidden: &[usize],
        activation: crate::nn::mlp::Activation,
        bounds: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if bounds.0 >= bounds.1 {
            return Err(Error::invalid_input("log-variance bounds must satisfy min < max"));
        }
        let spec = MlpSpec::new(input_dim, 2 * target_dim, hidden, activation)?;
        Ok(GaussianHead {
            net: Mlp::init(spec, rng),
            dim: target_dim,
            log_var_min: bounds.0,
            log_var_max: bounds.1,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn target_dim(&self) -> usize {
        self.dim
    }

    /// Bounded-prediction forward pass.
    pub fn predict(&self, input: &[f64]) -> Result<GaussianPrediction> {
        let mut cache = GaussianCache::default();
        self.forward_cached(input, &mut cache)?;
        Ok(cache.pred)
    }

    pub fn forward_cached(&self, input: &[f64], cache: &mut GaussianCache) -> Result<()> {
        self.net.forward_cached(input, &mut cache.mlp)?;
        let raw = cache.mlp.output();
        cache.pred.mean.clear();
        cache.pred.mean.extend_from_slice(&raw[..self.dim]);
        cache.pred.log_var.clear();
        cache.lv_slope.clear();
        for &r in &raw[self.dim..] {
            let (lv, slope) = soft_bound(r, self.log_var_min, self.log_var_max);
            cache.pred.log_var.push(lv);
            cache.lv_slope.push(slope);
        }
        Ok(())
    }

    /// Backward pass from gradients on the bounded (mean, log_var) outputs.
    pub fn backward(
        &self,
        cache: &GaussianCache,
        d_mean: &[f64],
        d_log_var: &[f64],
        grads: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let mut d_raw = vec![0.0; 2 * self.dim];
        d_raw[..self.dim].copy_from_slice(d_mean);
        for i in 0..self.dim {
            d_raw[self.dim + i] = d_log_var[i] * cache.lv_slope[i];
        }
        self.net.backward(&cache.mlp, &d_raw, grads, d_input);
    }

    pub fn save_into(&self, ckpt: &mut crate::checkpoint::Checkpoint, prefix: &str) -> Result<()> {
        ckpt.add(
            format!("{prefix}/lv_bounds"),
            &[2],
            &[self.log_var_min, self.log_var_max],
        )?;
        ckpt.add_scalar(format!("{prefix}/dim"), self.dim as f64)?;
        self.net.save_into(ckpt, &format!("{prefix}/net"))
    }

    pub fn load_from(ckpt: &crate::checkpoint::Checkpoint, prefix: &str) -> Result<Self> {
        let bounds = ckpt.get(&format!("{prefix}/lv_bounds"))?;
        Ok(GaussianHead {
            net: Mlp::load_from(ckpt, &format!("{prefix}/net"))?,
            dim: ckpt.scalar(&format!("{prefix}/dim"))? as usize,
            log_var_min: bounds.data[0],
            log_var_max: bounds.data[1],
        })
    }

    /// Draw from the predicted Gaussian: `mean + e^{lv/2} * eps`.
    pub fn sample<R: Rng>(&self, pred: &GaussianPrediction, rng: &mut R) -> Vec<f64> {
        pred.mean
            .iter()
            .zip(pred.log_var.iter())
            .map(|(&m, &lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (0.5 * lv).exp() * eps
            })
            .collect()
    }
}
