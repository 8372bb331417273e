//! Soft actor-critic: squashed-Gaussian policy, twin critics with Polyak
//! targets, and a learned entropy temperature.
//!
//! The soft state value used for Boltzmann anchor sampling and MPC terminal
//! scoring is computed from the twin critics and the temperature
//! (`estimate_value`), not a separate value network.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::gaussian::{GaussianCache, GaussianHead};
use crate::nn::mlp::{Activation, Mlp, MlpCache, MlpSpec};
use crate::nn::Adam;
use crate::policy::squash::{
    backprop_sample, deterministic_action, log_prob_of_action, sample_squashed, ActionBounds, SquashedSample,
};
use crate::rollout::Transition;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

/// Construction constants for [`SacAgent`].
#[derive(Debug, Clone)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    /// `None` defaults to `-act_dim`.
    pub target_entropy: Option<f64>,
    pub log_std_bounds: (f64, f64),
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            gamma: 0.99,
            tau: 0.005,
            policy_lr: 3e-4,
            q_lr: 3e-4,
            alpha_lr: 3e-4,
            init_alpha: 0.1,
            target_entropy: None,
            log_std_bounds: (-5.0, 2.0),
        }
    }
}

/// Loss report of one `update` call.
#[derive(Debug, Clone, Copy)]
pub struct SacLosses {
    pub q_loss: f64,
    pub pi_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub mean_log_prob: f64,
}

/// Soft actor-critic agent.
#[derive(Debug, Clone)]
pub struct SacAgent {
    obs_dim: usize,
    act_dim: usize,
    bounds: ActionBounds,
    policy: GaussianHead,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    opt_policy: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: Adam,
    log_alpha: f64,
    pub gamma: f64,
    tau: f64,
    target_entropy: f64,
    policy_lr: f64,
    q_lr: f64,
    alpha_lr: f64,
}

impl SacAgent {
    pub fn new<R: Rng>(
        obs_dim: usize,
        act_dim: usize,
        action_low: &[f64],
        action_high: &[f64],
        config: &SacConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.init_alpha > 0.0) {
            return Err(Error::invalid_input("init_alpha must be positive"));
        }
        if !(0.0..1.0).contains(&config.gamma) {
            return Err(Error::invalid_input("gamma must lie in [0, 1)"));
        }
        let bounds = ActionBounds::new(action_low, action_high)?;
        let policy = GaussianHead::init(
            obs_dim,
            act_dim,
            &config.hidden,
            config.activation,
            config.log_std_bounds,
            rng,
        )?;
        let q_spec = MlpSpec::new(obs_dim + act_dim, 1, &config.hidden, config.activation)?;
        let q1 = Mlp::init(q_spec.clone(), rng);
        let q2 = Mlp::init(q_spec, rng);
        let q1_target = q1.clone();
        let q2_target = q2.clone();
        Ok(SacAgent {
            obs_dim,
            act_dim,
            opt_policy: Adam::new(policy.net().n_params()),
            opt_q1: Adam::new(q1.n_params()),
            opt_q2: Adam::new(q2.n_params()),
            opt_alpha: Adam::new(1),
            policy,
            q1,
            q2,
            q1_target,
            q2_target,
            bounds,
            log_alpha: config.init_alpha.ln(),
            gamma: config.gamma,
            tau: config.tau,
            target_entropy: config.target_entropy.unwrap_or(-(act_dim as f64)),
            policy_lr: config.policy_lr,
            q_lr: config.q_lr,
            alpha_lr: config.alpha_lr,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    fn q_input(&self, obs: &[f64], action: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.obs_dim + self.act_dim);
        v.extend_from_slice(obs);
        v.extend_from_slice(action);
        v
    }

    fn q_forward(net: &Mlp, input: &[f64]) -> Result<f64> {
        Ok(net.forward(input)?[0])
    }

    /// Policy head outputs: `(mean, bounded log-std)`.
    fn policy_stats(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pred = self.policy.predict(obs)?;
        Ok((pred.mean, pred.log_var))
    }

    fn draw_sample(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<SquashedSample> {
        let (mean, log_std) = self.policy_stats(obs)?;
        let eps: Vec<f64> = (0..self.act_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(sample_squashed(&mean, &log_std, &eps, &self.bounds))
    }

    /// Action selection: the squashed mean when `deterministic`, otherwise a
    /// reparameterized sample. Always within the action bounds.
    pub fn act(&self, obs: &[f64], deterministic: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        if deterministic {
            let (mean, _) = self.policy_stats(obs)?;
            Ok(deterministic_action(&mean, &self.bounds))
        } else {
            Ok(self.draw_sample(obs, rng)?.action)
        }
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let (mean, log_std) = self.policy_stats(obs)?;
        Ok(log_prob_of_action(&mean, &log_std, action, &self.bounds))
    }

    /// Soft state value: mean over `n_samples` draws of
    /// `min_i Q_i(s, a) - alpha * log pi(a|s)`.
    pub fn estimate_value(&self, obs: &[f64], n_samples: usize, rng: &mut dyn RngCore) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::precondition("estimate_value needs n_samples >= 1"));
        }
        let alpha = self.alpha();
        let mut acc = 0.0;
        for _ in 0..n_samples {
            let sample = self.draw_sample(obs, rng)?;
            let input = self.q_input(obs, &sample.action);
            let q = Self::q_forward(&self.q1, &input)?.min(Self::q_forward(&self.q2, &input)?);
            acc += q - alpha * sample.log_prob;
        }
        Ok(acc / n_samples as f64)
    }

    /// Critic regression loss against fixed targets (mean over both twins of
    /// the squared error means).
    pub(crate) fn critic_loss_given_targets(&self, batch: &[Transition], targets: &[f64]) -> Result<(f64, f64)> {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for (t, &y) in batch.iter().zip(targets) {
            let input = self.q_input(&t.s, &t.a);
            let d1 = Self::q_forward(&self.q1, &input)? - y;
            let d2 = Self::q_forward(&self.q2, &input)? - y;
            l1 += d1 * d1;
            l2 += d2 * d2;
        }
        let n = batch.len() as f64;
        Ok((l1 / n, l2 / n))
    }

    /// Actor loss `mean(alpha * logp - min Q)` with the per-sample noise
    /// fixed, so it is a deterministic function of the policy parameters.
    pub(crate) fn actor_loss_with_noise(&self, states: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<f64> {
        let alpha = self.alpha();
        let mut loss = 0.0;
        for (s, e) in states.iter().zip(eps) {
            let (mean, log_std) = self.policy_stats(s)?;
            let sample = sample_squashed(&mean, &log_std, e, &self.bounds);
            let input = self.q_input(s, &sample.action);
            let q = Self::q_forward(&self.q1, &input)?.min(Self::q_forward(&self.q2, &input)?);
            loss += alpha * sample.log_prob - q;
        }
        Ok(loss / states.len() as f64)
    }

    /// Analytic gradient of [`Self::actor_loss_with_noise`] with respect to
    /// the policy parameters.
    pub(crate) fn actor_grad_with_noise(&self, states: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<Vec<f64>> {
        let alpha = self.alpha();
        let n = states.len() as f64;
        let mut grads = vec![0.0; self.policy.net().n_params()];
        let mut scratch_q = vec![0.0; self.q1.n_params()];
        let mut policy_cache = GaussianCache::default();
        let mut q_cache = MlpCache::default();
        let mut d_input = vec![0.0; self.obs_dim + self.act_dim];
        for (s, e) in states.iter().zip(eps) {
            self.policy.forward_cached(s, &mut policy_cache)?;
            let sample = sample_squashed(&policy_cache.pred.mean, &policy_cache.pred.log_var, e, &self.bounds);
            let input = self.q_input(s, &sample.action);
            let q1v = Self::q_forward(&self.q1, &input)?;
            let q2v = Self::q_forward(&self.q2, &input)?;
            let qnet = if q1v <= q2v { &self.q1 } else { &self.q2 };
            qnet.forward_cached(&input, &mut q_cache)?;
            scratch_q.iter_mut().for_each(|g| *g = 0.0);
            qnet.backward(&q_cache, &[-1.0 / n], &mut scratch_q, Some(&mut d_input));
            let d_action = &d_input[self.obs_dim..];
            let mut d_mean = vec![0.0; self.act_dim];
            let mut d_log_std = vec![0.0; self.act_dim];
            backprop_sample(&sample, &self.bounds, d_action, alpha / n, &mut d_mean, &mut d_log_std);
            self.policy.backward(&policy_cache, &d_mean, &d_log_std, &mut grads, None);
        }
        Ok(grads)
    }

    /// One SAC update: twin-critic regression toward entropy-regularized
    /// Bellman targets (min of target twins), a reparameterized actor step,
    /// a temperature step toward the entropy target, then Polyak averaging.
    pub fn update(&mut self, batch: &[Transition], rng: &mut dyn RngCore) -> Result<SacLosses> {
        if batch.is_empty() {
            return Err(Error::precondition("SAC update needs a nonempty batch"));
        }
        let n = batch.len() as f64;
        let alpha = self.alpha();

        // Bellman targets from the target twins and a fresh next action.
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            let next_sample = self.draw_sample(&t.s_next, rng)?;
            let input = self.q_input(&t.s_next, &next_sample.action);
            let qt = Self::q_forward(&self.q1_target, &input)?.min(Self::q_forward(&self.q2_target, &input)?);
            let mask = if t.done { 0.0 } else { 1.0 };
            targets.push(t.r + self.gamma * mask * (qt - alpha * next_sample.log_prob));
        }

        // Critic steps.
        let mut q_cache = MlpCache::default();
        let mut grads1 = vec![0.0; self.q1.n_params()];
        let mut grads2 = vec![0.0; self.q2.n_params()];
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for (t, &y) in batch.iter().zip(&targets) {
            let input = self.q_input(&t.s, &t.a);
            self.q1.forward_cached(&input, &mut q_cache)?;
            let d1 = q_cache.output()[0] - y;
            l1 += d1 * d1;
            self.q1.backward(&q_cache, &[2.0 * d1 / n], &mut grads1, None);
            self.q2.forward_cached(&input, &mut q_cache)?;
            let d2 = q_cache.output()[0] - y;
            l2 += d2 * d2;
            self.q2.backward(&q_cache, &[2.0 * d2 / n], &mut grads2, None);
        }
        l1 /= n;
        l2 /= n;
        let q_loss = 0.5 * (l1 + l2);
        if !q_loss.is_finite() {
            return Err(Error::numerical(format!("critic loss diverged: {l1} / {l2}")));
        }
        self.opt_q1.step(self.q1.params_mut(), &grads1, self.q_lr)?;
        self.opt_q2.step(self.q2.params_mut(), &grads2, self.q_lr)?;

        // Actor step (uses the freshly updated critics).
        let mut policy_grads = vec![0.0; self.policy.net().n_params()];
        let mut scratch_q = vec![0.0; self.q1.n_params()];
        let mut policy_cache = GaussianCache::default();
        let mut d_input = vec![0.0; self.obs_dim + self.act_dim];
        let mut pi_loss = 0.0;
        let mut sum_log_prob = 0.0;
        for t in batch {
            self.policy.forward_cached(&t.s, &mut policy_cache)?;
            let eps: Vec<f64> = (0..self.act_dim).map(|_| rng.sample(StandardNormal)).collect();
            let sample = sample_squashed(&policy_cache.pred.mean, &policy_cache.pred.log_var, &eps, &self.bounds);
            let input = self.q_input(&t.s, &sample.action);
            let q1v = Self::q_forward(&self.q1, &input)?;
            let q2v = Self::q_forward(&self.q2, &input)?;
            let (qmin, qnet) = if q1v <= q2v { (q1v, &self.q1) } else { (q2v, &self.q2) };
            pi_loss += alpha * sample.log_prob - qmin;
            sum_log_prob += sample.log_prob;
            qnet.forward_cached(&input, &mut q_cache)?;
            scratch_q.iter_mut().for_each(|g| *g = 0.0);
            qnet.backward(&q_cache, &[-1.0 / n], &mut scratch_q, Some(&mut d_input));
            let mut d_mean = vec![0.0; self.act_dim];
            let mut d_log_std = vec![0.0; self.act_dim];
            backprop_sample(
                &sample,
                &self.bounds,
                &d_input[self.obs_dim..],
                alpha / n,
                &mut d_mean,
                &mut d_log_std,
            );
            self.policy.backward(&policy_cache, &d_mean, &d_log_std, &mut policy_grads, None);
        }
        pi_loss /= n;
        if !pi_loss.is_finite() {
            return Err(Error::numerical(format!("actor loss diverged: {pi_loss}")));
        }
        self.opt_policy
            .step(self.policy.net_mut().params_mut(), &policy_grads, self.policy_lr)?;

        // Temperature step on J(log_alpha) = -log_alpha * E[logp + H_target]:
        // alpha rises while entropy is below target and falls above it.
        let mean_log_prob = sum_log_prob / n;
        let alpha_grad = -(mean_log_prob + self.target_entropy);
        let mut log_alpha = [self.log_alpha];
        self.opt_alpha.step(&mut log_alpha, &[alpha_grad], self.alpha_lr)?;
        self.log_alpha = log_alpha[0];
        let alpha_loss = -self.log_alpha * (mean_log_prob + self.target_entropy);

        // Polyak-averaged targets.
        polyak(&mut self.q1_target, &self.q1, self.tau);
        polyak(&mut self.q2_target, &self.q2, self.tau);

        Ok(SacLosses {
            q_loss,
            pi_loss,
            alpha_loss,
            alpha: self.alpha(),
            mean_log_prob,
        })
    }

    /// Parameter fingerprint across policy, critics, targets and alpha.
    pub fn fingerprint(&self) -> u64 {
        let mut h = self.policy.net().fingerprint();
        for net in [&self.q1, &self.q2, &self.q1_target, &self.q2_target] {
            h ^= net.fingerprint().rotate_left(17);
        }
        h ^ self.log_alpha.to_bits()
    }

    /// Test access to the critic nets.
    pub(crate) fn q_nets_mut(&mut self) -> (&mut Mlp, &mut Mlp, &mut Mlp, &mut Mlp) {
        (&mut self.q1, &mut self.q2, &mut self.q1_target, &mut self.q2_target)
    }

    pub(crate) fn policy_mut(&mut self) -> &mut GaussianHead {
        &mut self.policy
    }

    pub(crate) fn policy_params(&self) -> &[f64] {
        self.policy.net().params()
    }

    pub(crate) fn q1(&self) -> &Mlp {
        &self.q1
    }

    pub(crate) fn q1_target(&self) -> &Mlp {
        &self.q1_target
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.add(format!("{prefix}/dims"), &[2], &[self.obs_dim as f64, self.act_dim as f64])?;
        ckpt.add(format!("{prefix}/low"), &[self.act_dim], &self.bounds.low)?;
        ckpt.add(format!("{prefix}/high"), &[self.act_dim], &self.bounds.high)?;
        ckpt.add_scalar(format!("{prefix}/log_alpha"), self.log_alpha)?;
        ckpt.add(
            format!("{prefix}/hyper"),
            &[5],
            &[self.gamma, self.tau, self.target_entropy, self.policy_lr, self.q_lr],
        )?;
        ckpt.add_scalar(format!("{prefix}/alpha_lr"), self.alpha_lr)?;
        self.policy.save_into(ckpt, &format!("{prefix}/policy"))?;
        self.q1.save_into(ckpt, &format!("{prefix}/q1"))?;
        self.q2.save_into(ckpt, &format!("{prefix}/q2"))?;
        self.q1_target.save_into(ckpt, &format!("{prefix}/q1t"))?;
        self.q2_target.save_into(ckpt, &format!("{prefix}/q2t"))?;
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let dims = ckpt.get(&format!("{prefix}/dims"))?;
        let (obs_dim, act_dim) = (dims.data[0] as usize, dims.data[1] as usize);
        let low = ckpt.get(&format!("{prefix}/low"))?.data.clone();
        let high = ckpt.get(&format!("{prefix}/high"))?.data.clone();
        let hyper = ckpt.get(&format!("{prefix}/hyper"))?.data.clone();
        let policy = GaussianHead::load_from(ckpt, &format!("{prefix}/policy"))?;
        let q1 = Mlp::load_from(ckpt, &format!("{prefix}/q1"))?;
        let q2 = Mlp::load_from(ckpt, &format!("{prefix}/q2"))?;
        Ok(SacAgent {
            obs_dim,
            act_dim,
            bounds: ActionBounds::new(&low, &high)?,
            opt_policy: Adam::new(policy.net().n_params()),
            opt_q1: Adam::new(q1.n_params()),
            opt_q2: Adam::new(q2.n_params()),
            opt_alpha: Adam::new(1),
            policy,
            q1,
            q2,
            q1_target: Mlp::load_from(ckpt, &format!("{prefix}/q1t"))?,
            q2_target: Mlp::load_from(ckpt, &format!("{prefix}/q2t"))?,
            log_alpha: ckpt.scalar(&format!("{prefix}/log_alpha"))?,
            gamma: hyper[0],
            tau: hyper[1],
            target_entropy: hyper[2],
            policy_lr: hyper[3],
            q_lr: hyper[4],
            alpha_lr: ckpt.scalar(&format!("{prefix}/alpha_lr"))?,
        })
    }
}

/// `target <- (1 - tau) * target + tau * online`, elementwise and exact.
pub fn polyak(target: &mut Mlp, online: &Mlp, tau: f64) {
    for (t, &o) in target.params_mut().iter_mut().zip(online.params()) {
        *t = (1.0 - tau) * *t + tau * o;
    }
}
