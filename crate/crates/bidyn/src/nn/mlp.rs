//! Multilayer perceptrons with hand-rolled reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>` (per-layer weight matrix in
//! row-major `[out][in]` order, then bias). The flat layout keeps the
//! optimizer, finite-difference probes, fingerprints and checkpointing
//! trivial; layers are views defined by precomputed offsets.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn deriv_from_post(self, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if post > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation id {id}"))),
        }
    }
}

/// Shape description of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid_input("input_dim and output_dim must be >= 1"));
        }
        if hidden.is_empty() {
            return Err(Error::invalid_input("at least one hidden layer is required"));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid_input("hidden sizes must be >= 1"));
        }
        Ok(MlpSpec {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation,
        })
    }

    /// Layer dimensions including input and output.
    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.output_dim);
        d
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerView {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

/// Feed-forward network. Hidden layers use `spec.activation`; the output
/// layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    layers: Vec<LayerView>,
}

/// Per-sample forward cache; holds post-activation values of every layer
/// (index 0 is the input), enough to replay the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Dot product with four accumulators; keeps the reduction order fixed while
/// letting the compiler vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(spec: MlpSpec) -> Self {
        let dims = spec.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            layers.push(LayerView {
                w_off: off,
                b_off: off + in_dim * out_dim,
                in_dim,
                out_dim,
            });
            off += in_dim * out_dim + out_dim;
        }
        Mlp {
            spec,
            params: vec![0.0; off],
            layers,
        }
    }

    /// He-style initialization for hidden layers; the output layer gets a
    /// smaller scale so heads start near zero.
    pub fn init<R: Rng>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut net = Mlp::zeros(spec);
        let n_layers = net.layers.len();
        for (l, view) in net.layers.clone().into_iter().enumerate() {
            let fan_in = view.in_dim as f64;
            let std = if l + 1 == n_layers {
                0.1 / fan_in.sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            for i in 0..view.in_dim * view.out_dim {
                let z: f64 = rng.sample(StandardNormal);
                net.params[view.w_off + i] = std * z;
            }
            // biases stay zero
        }
        net
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid_input(format!(
                "parameter count mismatch: expected {}, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Weight matrix and bias of layer `l` as `(weights, bias, in_dim, out_dim)`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64], usize, usize) {
        let v = self.layers[l];
        (
            &self.params[v.w_off..v.w_off + v.in_dim * v.out_dim],
            &self.params[v.b_off..v.b_off + v.out_dim],
            v.in_dim,
            v.out_dim,
        )
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.spec.input_dim {
            return Err(Error::invalid_input(format!(
                "input length {} does not match input_dim {}",
                input.len(),
                self.spec.input_dim
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_input("input contains non-finite values"));
        }
        Ok(())
    }

    /// Deterministic forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut cache = MlpCache::default();
        self.forward_cached(input, &mut cache)?;
        Ok(cache.acts.pop().unwrap())
    }

    /// Forward pass that records activations for a later [`Mlp::backward`].
    pub fn forward_cached(&self, input: &[f64], cache: &mut MlpCache) -> Result<()> {
        self.check_input(input)?;
        cache.acts.resize(self.layers.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let n_layers = self.layers.len();
        for (l, view) in self.layers.iter().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let x = prev[l].as_slice();
            let out = &mut rest[0];
            out.clear();
            out.reserve(view.out_dim);
            let last = l + 1 == n_layers;
            for o in 0..view.out_dim {
                let row = &self.params[view.w_off + o * view.in_dim..view.w_off + (o + 1) * view.in_dim];
                let z = dot(row, x) + self.params[view.b_off + o];
                out.push(if last { z } else { self.spec.activation.apply(z) });
            }
        }
        Ok(())
    }

    /// Reverse pass. `d_output` is dL/d(output); gradients accumulate into
    /// `grads` (flat, same layout as `params`). When `d_input` is given it
    /// receives dL/d(input), overwritten.
    pub fn backward(&self, cache: &MlpCache, d_output: &[f64], grads: &mut [f64], mut d_input: Option<&mut [f64]>) {
        assert_eq!(d_output.len(), self.spec.output_dim, "d_output length mismatch");
        assert_eq!(grads.len(), self.params.len(), "grads length mismatch");
        let n_layers = self.layers.len();
        let mut delta = d_output.to_vec();
        for l in (0..n_layers).rev() {
            let view = self.layers[l];
            let x = cache.acts[l].as_slice();
            // dL/dz for this layer (output layer is linear).
            if l + 1 != n_layers {
                let post = cache.acts[l + 1].as_slice();
                for (d, &p) in delta.iter_mut().zip(post) {
                    *d *= self.spec.activation.deriv_from_post(p);
                }
            }
            for o in 0..view.out_dim {
                let dz = delta[o];
                if dz != 0.0 {
                    let row = &mut grads[view.w_off + o * view.in_dim..view.w_off + (o + 1) * view.in_dim];
                    for (g, &xi) in row.iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                }
                grads[view.b_off + o] += dz;
            }
            let need_prev = l > 0 || d_input.is_some();
            if need_prev {
                let mut prev = vec![0.0; view.in_dim];
                for o in 0..view.out_dim {
                    let dz = delta[o];
                    if dz != 0.0 {
                        let row = &self.params[view.w_off + o * view.in_dim..view.w_off + (o + 1) * view.in_dim];
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += dz * w;
                        }
                    }
                }
                if l == 0 {
                    if let Some(di) = d_input.as_deref_mut() {
                        di.copy_from_slice(&prev);
                    }
                }
                delta = prev;
            }
        }
    }

    /// Write this network into a checkpoint under `prefix`: shape metadata
    /// plus one weight and one bias record per layer.
    pub fn save_into(&self, ckpt: &mut crate::checkpoint::Checkpoint, prefix: &str) -> Result<()> {
        ckpt.add(
            format!("{prefix}/io"),
            &[2],
            &[self.spec.input_dim as f64, self.spec.output_dim as f64],
        )?;
        let hidden: Vec<f64> = self.spec.hidden.iter().map(|&h| h as f64).collect();
        ckpt.add(format!("{prefix}/hidden"), &[hidden.len()], &hidden)?;
        ckpt.add_scalar(format!("{prefix}/act"), self.spec.activation.id() as f64)?;
        for (l, view) in self.layers.iter().enumerate() {
            ckpt.add(
                format!("{prefix}/layer{l}/w"),
                &[view.out_dim, view.in_dim],
                &self.params[view.w_off..view.w_off + view.in_dim * view.out_dim],
            )?;
            ckpt.add(
                format!("{prefix}/layer{l}/b"),
                &[view.out_dim],
                &self.params[view.b_off..view.b_off + view.out_dim],
            )?;
        }
        Ok(())
    }

    pub fn load_from(ckpt: &crate::checkpoint::Checkpoint, prefix: &str) -> Result<Self> {
        let io = ckpt.get(&format!("{prefix}/io"))?;
        let hidden: Vec<usize> = ckpt
            .get(&format!("{prefix}/hidden"))?
            .data
            .iter()
            .map(|&h| h as usize)
            .collect();
        let act = Activation::from_id(ckpt.scalar(&format!("{prefix}/act"))? as u8)?;
        let spec = MlpSpec::new(io.data[0] as usize, io.data[1] as usize, &hidden, act)?;
        let mut net = Mlp::zeros(spec);
        for (l, view) in net.layers.clone().into_iter().enumerate() {
            let w = ckpt.get(&format!("{prefix}/layer{l}/w"))?;
            if w.shape != [view.out_dim, view.in_dim] {
                return Err(Error::Format(format!("{prefix}/layer{l}/w has unexpected shape")));
            }
            net.params[view.w_off..view.w_off + w.data.len()].copy_from_slice(&w.data);
            let b = ckpt.get(&format!("{prefix}/layer{l}/b"))?;
            net.params[view.b_off..view.b_off + b.data.len()].copy_from_slice(&b.data);
        }
        Ok(net)
    }

    /// Zero the output layer; heads that must start neutral (e.g.
    /// discriminator logits) use this after random init.
    pub fn zero_output_layer(&mut self) {
        let view = *self.layers.last().unwrap();
        for p in &mut self.params[view.w_off..view.b_off + view.out_dim] {
            *p = 0.0;
        }
    }

    /// Order-insensitive fingerprint of the parameter vector; used by tests
    /// to assert that read-only paths leave parameters untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &p in &self.params {
            h ^= p.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd::{finite_difference_gradient, max_relative_error};
    use crate::rng::substream;

    fn spec(i: usize, o: usize, h: &[usize]) -> MlpSpec {
        MlpSpec::new(i, o, h, Activation::Relu).unwrap()
    }

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let net = Mlp::zeros(spec(3, 2, &[4]));
        let out = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_linear_layer() {
        // One hidden layer sized like the input, identity weights on both
        // layers, ReLU passes positives through.
        let mut net = Mlp::zeros(spec(3, 3, &[3]));
        let n = 3;
        let mut params = vec![0.0; net.n_params()];
        for d in 0..n {
            params[d * n + d] = 1.0; // layer 0 weights
            params[n * n + n + d * n + d] = 1.0; // layer 1 weights
        }
        net.set_params(&params).unwrap();
        let x = [0.3, 1.7, 0.05];
        let out = net.forward(&x).unwrap();
        for (o, xi) in out.iter().zip(x.iter()) {
            assert!((o - xi).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = substream(11, "mlp-purity", 0);
        let net = Mlp::init(spec(4, 3, &[8, 8]), &mut rng);
        let x = [0.1, -0.4, 2.0, 0.9];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let net = Mlp::zeros(spec(3, 2, &[4]));
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn quadratic_loss_gradient_closed_form() {
        // Loss = ||W h - y||^2 at W = 0 over the output layer, where h is the
        // hidden activation: dL/dW = -2 y h^T and dL/db = -2 y.
        let mut net = Mlp::zeros(spec(2, 2, &[3]));
        let hidden_w = [0.5, -0.3, 1.1, 0.2, 0.7, -0.9];
        let n = net.n_params();
        let mut params = vec![0.0; n];
        params[..6].copy_from_slice(&hidden_w);
        net.set_params(&params).unwrap();
        let x = [0.7, 1.3];
        let y = [0.4, 0.9];
        let mut cache = MlpCache::default();
        net.forward_cached(&x, &mut cache).unwrap();
        let h = cache.acts[1].clone();
        let d_out: Vec<f64> = y.iter().map(|t| -2.0 * t).collect();
        let mut grads = vec![0.0; n];
        net.backward(&cache, &d_out, &mut grads, None);
        let v = net.layers[1];
        for o in 0..2 {
            for i in 0..3 {
                let expect = -2.0 * y[o] * h[i];
                assert!((grads[v.w_off + o * 3 + i] - expect).abs() < 1e-12);
            }
            assert!((grads[v.b_off + o] - (-2.0 * y[o])).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (inst, act) in [(0u64, Activation::Relu), (1, Activation::Tanh), (2, Activation::Relu)] {
            let mut rng = substream(42, "mlp-fd", inst);
            let net = Mlp::init(MlpSpec::new(3, 2, &[6, 5], act).unwrap(), &mut rng);
            let x = [0.3, -0.8, 1.2];
            let y = [0.5, -0.2];
            let f = |p: &[f64]| {
                let mut m = net.clone();
                m.set_params(p).unwrap();
                let out = m.forward(&x).unwrap();
                out.iter().zip(y.iter()).map(|(o, t)| (o - t) * (o - t)).sum::<f64>()
            };
            let params = net.params().to_vec();
            let fd = finite_difference_gradient(&f, &params, 1e-5);
            let mut cache = MlpCache::default();
            net.forward_cached(&x, &mut cache).unwrap();
            let d_out: Vec<f64> = cache.output().iter().zip(y.iter()).map(|(o, t)| 2.0 * (o - t)).collect();
            let mut grads = vec![0.0; net.n_params()];
            net.backward(&cache, &d_out, &mut grads, None);
            assert!(
                max_relative_error(&grads, &fd) < 1e-4,
                "gradient mismatch for instance {inst}"
            );
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = substream(5, "mlp-const", 0);
        let net = Mlp::init(spec(2, 2, &[4]), &mut rng);
        let mut cache = MlpCache::default();
        net.forward_cached(&[0.2, 0.4], &mut cache).unwrap();
        let mut grads = vec![0.0; net.n_params()];
        net.backward(&cache, &[0.0, 0.0], &mut grads, None);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn d_input_matches_finite_differences() {
        let mut rng = substream(9, "mlp-dinput", 0);
        let net = Mlp::init(MlpSpec::new(3, 2, &[5], Activation::Tanh).unwrap(), &mut rng);
        let x = vec![0.4, -0.1, 0.7];
        let f = |xi: &[f64]| {
            let out = net.forward(xi).unwrap();
            out.iter().map(|o| o * o).sum::<f64>()
        };
        let fd = finite_difference_gradient(&f, &x, 1e-6);
        let mut cache = MlpCache::default();
        net.forward_cached(&x, &mut cache).unwrap();
        let d_out: Vec<f64> = cache.output().iter().map(|o| 2.0 * o).collect();
        let mut grads = vec![0.0; net.n_params()];
        let mut d_in = vec![0.0; 3];
        net.backward(&cache, &d_out, &mut grads, Some(&mut d_in));
        assert!(max_relative_error(&d_in, &fd) < 1e-5);
    }
}
