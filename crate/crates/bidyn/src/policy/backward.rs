//! Backward policy: generates the action that plausibly led *into* a given
//! state, trained either by maximum likelihood on recent real transitions or
//! adversarially against a conditional discriminator.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::gaussian::{sigmoid, softplus, GaussianCache, GaussianHead};
use crate::nn::mlp::{Activation, Mlp, MlpCache, MlpSpec};
use crate::nn::Adam;
use crate::policy::squash::{
    backprop_sample, deterministic_action, grad_log_prob_fixed_action, log_prob_of_action, sample_squashed,
    ActionBounds,
};
use crate::rollout::Transition;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

/// Squashed-Gaussian map from a successor state to the action leading in.
#[derive(Debug, Clone)]
pub struct BackwardPolicy {
    head: GaussianHead,
    opt: Adam,
    bounds: ActionBounds,
    lr: f64,
}

impl BackwardPolicy {
    pub fn new<R: Rng>(
        obs_dim: usize,
        action_low: &[f64],
        action_high: &[f64],
        hidden: &[usize],
        activation: Activation,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bounds = ActionBounds::new(action_low, action_high)?;
        let head = GaussianHead::init(obs_dim, bounds.dim(), hidden, activation, (-5.0, 2.0), rng)?;
        Ok(BackwardPolicy {
            opt: Adam::new(head.net().n_params()),
            head,
            bounds,
            lr,
        })
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub(crate) fn head(&self) -> &GaussianHead {
        &self.head
    }

    pub(crate) fn head_mut(&mut self) -> &mut GaussianHead {
        &mut self.head
    }

    fn stats(&self, s_next: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pred = self.head.predict(s_next)?;
        Ok((pred.mean, pred.log_var))
    }

    /// Stochastic action conditioned on the successor state; always within
    /// the action bounds.
    pub fn sample_action(&self, s_next: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let (mean, log_std) = self.stats(s_next)?;
        let eps: Vec<f64> = (0..self.bounds.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Ok(sample_squashed(&mean, &log_std, &eps, &self.bounds).action)
    }

    pub fn mean_action(&self, s_next: &[f64]) -> Result<Vec<f64>> {
        let (mean, _) = self.stats(s_next)?;
        Ok(deterministic_action(&mean, &self.bounds))
    }

    pub fn log_prob(&self, s_next: &[f64], action: &[f64]) -> Result<f64> {
        let (mean, log_std) = self.stats(s_next)?;
        Ok(log_prob_of_action(&mean, &log_std, action, &self.bounds))
    }

    /// Mean negative log-likelihood of `(a_t | s_{t+1})` pairs.
    pub(crate) fn nll(&self, batch: &[Transition]) -> Result<f64> {
        let mut loss = 0.0;
        for t in batch {
            loss -= self.log_prob(&t.s_next, &t.a)?;
        }
        Ok(loss / batch.len() as f64)
    }

    pub(crate) fn nll_grad(&self, batch: &[Transition]) -> Result<Vec<f64>> {
        let n = batch.len() as f64;
        let mut grads = vec![0.0; self.head.net().n_params()];
        let mut cache = GaussianCache::default();
        let dim = self.bounds.dim();
        for t in batch {
            self.head.forward_cached(&t.s_next, &mut cache)?;
            let mut d_mean = vec![0.0; dim];
            let mut d_log_std = vec![0.0; dim];
            grad_log_prob_fixed_action(&cache.pred.mean, &cache.pred.log_var, &t.a, &self.bounds, &mut d_mean, &mut d_log_std);
            // loss is -logp / n
            d_mean.iter_mut().for_each(|g| *g = -*g / n);
            d_log_std.iter_mut().for_each(|g| *g = -*g / n);
            self.head.backward(&cache, &d_mean, &d_log_std, &mut grads, None);
        }
        Ok(grads)
    }

    /// One maximum-likelihood step on recent real transitions; returns the
    /// pre-update mean NLL.
    pub fn train_mle(&mut self, recent: &[Transition]) -> Result<f64> {
        if recent.is_empty() {
            return Err(Error::precondition("backward-policy training needs transitions"));
        }
        let loss = self.nll(recent)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("backward-policy NLL diverged: {loss}")));
        }
        let grads = self.nll_grad(recent)?;
        self.opt.step(self.head.net_mut().params_mut(), &grads, self.lr)?;
        Ok(loss)
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.add(format!("{prefix}/low"), &[self.bounds.low.len()], &self.bounds.low)?;
        ckpt.add(format!("{prefix}/high"), &[self.bounds.high.len()], &self.bounds.high)?;
        ckpt.add_scalar(format!("{prefix}/lr"), self.lr)?;
        self.head.save_into(ckpt, &format!("{prefix}/head"))
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let low = ckpt.get(&format!("{prefix}/low"))?.data.clone();
        let high = ckpt.get(&format!("{prefix}/high"))?.data.clone();
        let head = GaussianHead::load_from(ckpt, &format!("{prefix}/head"))?;
        Ok(BackwardPolicy {
            opt: Adam::new(head.net().n_params()),
            head,
            bounds: ActionBounds::new(&low, &high)?,
            lr: ckpt.scalar(&format!("{prefix}/lr"))?,
        })
    }
}

/// Conditional discriminator scoring `(action, successor state)` pairs.
/// The output layer starts at zero so an untrained discriminator emits logit
/// zero for every input.
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: Mlp,
    opt: Adam,
    lr: f64,
    act_dim: usize,
}

impl Discriminator {
    pub fn new<R: Rng>(obs_dim: usize, act_dim: usize, hidden: &[usize], activation: Activation, lr: f64, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(act_dim + obs_dim, 1, hidden, activation)?;
        let mut net = Mlp::init(spec, rng);
        net.zero_output_layer();
        Ok(Discriminator {
            opt: Adam::new(net.n_params()),
            net,
            lr,
            act_dim,
        })
    }

    fn input(&self, action: &[f64], s_next: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(action.len() + s_next.len());
        v.extend_from_slice(action);
        v.extend_from_slice(s_next);
        v
    }

    pub fn logit(&self, action: &[f64], s_next: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.input(action, s_next))?[0])
    }

    pub(crate) fn net(&self) -> &Mlp {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Binary cross-entropy of reals vs fakes:
    /// `mean[softplus(-logit_real) + softplus(logit_fake)]`.
    pub(crate) fn bce(&self, reals: &[(&[f64], &[f64])], fakes: &[(&[f64], &[f64])]) -> Result<f64> {
        let mut loss = 0.0;
        for (a, s) in reals {
            loss += softplus(-self.logit(a, s)?);
        }
        for (a, s) in fakes {
            loss += softplus(self.logit(a, s)?);
        }
        Ok(loss / reals.len() as f64)
    }

    pub(crate) fn bce_grad(&self, reals: &[(&[f64], &[f64])], fakes: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        let n = reals.len() as f64;
        let mut grads = vec![0.0; self.net.n_params()];
        let mut cache = MlpCache::default();
        for (a, s) in reals {
            self.net.forward_cached(&self.input(a, s), &mut cache)?;
            let l = cache.output()[0];
            self.net.backward(&cache, &[-(sigmoid(-l)) / n], &mut grads, None);
        }
        for (a, s) in fakes {
            self.net.forward_cached(&self.input(a, s), &mut cache)?;
            let l = cache.output()[0];
            self.net.backward(&cache, &[sigmoid(l) / n], &mut grads, None);
        }
        Ok(grads)
    }

    /// One ascent step on the adversarial value (= descent on BCE); returns
    /// the pre-update loss.
    pub fn train_step(&mut self, reals: &[(&[f64], &[f64])], fakes: &[(&[f64], &[f64])]) -> Result<f64> {
        if reals.is_empty() || fakes.is_empty() {
            return Err(Error::precondition("discriminator step needs reals and fakes"));
        }
        let loss = self.bce(reals, fakes)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!("discriminator loss diverged: {loss}")));
        }
        let grads = self.bce_grad(reals, fakes)?;
        self.opt.step(self.net.params_mut(), &grads, self.lr)?;
        Ok(loss)
    }
}

/// Generator objective `mean[log(1 - sigmoid(D(fake)))]` for fixed noise,
/// expressed stably as `mean[-softplus(D_logit)]`.
pub(crate) fn generator_loss(policy: &BackwardPolicy, disc: &Discriminator, states: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<f64> {
    let mut loss = 0.0;
    for (s, e) in states.iter().zip(eps) {
        let pred = policy.head.predict(s)?;
        let sample = sample_squashed(&pred.mean, &pred.log_var, e, &policy.bounds);
        loss -= softplus(disc.logit(&sample.action, s)?);
    }
    Ok(loss / states.len() as f64)
}

pub(crate) fn generator_grad(policy: &BackwardPolicy, disc: &Discriminator, states: &[Vec<f64>], eps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = states.len() as f64;
    let act_dim = policy.bounds.dim();
    let mut grads = vec![0.0; policy.head.net().n_params()];
    let mut head_cache = GaussianCache::default();
    let mut d_cache = MlpCache::default();
    let mut scratch = vec![0.0; disc.net.n_params()];
    let mut d_input = vec![0.0; disc.net.input_dim()];
    for (s, e) in states.iter().zip(eps) {
        policy.head.forward_cached(s, &mut head_cache)?;
        let sample = sample_squashed(&head_cache.pred.mean, &head_cache.pred.log_var, e, &policy.bounds);
        let input = disc.input(&sample.action, s);
        disc.net.forward_cached(&input, &mut d_cache)?;
        let logit = d_cache.output()[0];
        scratch.iter_mut().for_each(|g| *g = 0.0);
        // d(-softplus(l))/dl = -sigmoid(l), divided by batch size
        disc.net
            .backward(&d_cache, &[-sigmoid(logit) / n], &mut scratch, Some(&mut d_input));
        let mut d_mean = vec![0.0; act_dim];
        let mut d_log_std = vec![0.0; act_dim];
        backprop_sample(&sample, &policy.bounds, &d_input[..act_dim], 0.0, &mut d_mean, &mut d_log_std);
        policy.head.backward(&head_cache, &d_mean, &d_log_std, &mut grads, None);
    }
    Ok(grads)
}

/// One adversarial round: a discriminator ascent step on real `(a, s')`
/// pairs vs policy samples, then a generator descent step. Returns the
/// pre-update `(d_loss, g_loss)`.
pub fn train_backward_policy_gan<R: Rng>(
    policy: &mut BackwardPolicy,
    disc: &mut Discriminator,
    recent: &[Transition],
    rng: &mut R,
) -> Result<(f64, f64)> {
    if recent.is_empty() {
        return Err(Error::precondition("backward-policy training needs transitions"));
    }
    let reals: Vec<(&[f64], &[f64])> = recent.iter().map(|t| (t.a.as_slice(), t.s_next.as_slice())).collect();
    let fake_actions: Vec<Vec<f64>> = recent
        .iter()
        .map(|t| policy.sample_action(&t.s_next, rng))
        .collect::<Result<_>>()?;
    let fakes: Vec<(&[f64], &[f64])> = fake_actions
        .iter()
        .zip(recent.iter())
        .map(|(a, t)| (a.as_slice(), t.s_next.as_slice()))
        .collect();
    let d_loss = disc.train_step(&reals, &fakes)?;

    let states: Vec<Vec<f64>> = recent.iter().map(|t| t.s_next.clone()).collect();
    let eps: Vec<Vec<f64>> = (0..states.len())
        .map(|_| (0..policy.bounds.dim()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let g_loss = generator_loss(policy, disc, &states, &eps)?;
    if !g_loss.is_finite() {
        return Err(Error::numerical(format!("generator loss diverged: {g_loss}")));
    }
    let grads = generator_grad(policy, disc, &states, &eps)?;
    let lr = policy.lr;
    policy.opt.step(policy.head.net_mut().params_mut(), &grads, lr)?;
    Ok((d_loss, g_loss))
}
