//! Gradient-fidelity verification: every analytic gradient in the crate
//! against central finite differences on random small instances.
//!
//! The finite-difference side only ever evaluates losses through the public
//! forward paths; it shares no code with the backward passes it checks.

use crate::error::Result;
use crate::nn::fd::{finite_difference_gradient, max_relative_error};
use crate::nn::gaussian::{gaussian_nll, gaussian_nll_grad, GaussianCache, GaussianHead};
use crate::nn::mlp::Activation;
use crate::policy::backward::{generator_grad, generator_loss, BackwardPolicy, Discriminator};
use crate::policy::sac::{SacAgent, SacConfig};
use crate::rng::substream;
use crate::rollout::{Source, Transition};
use rand::Rng;
use rand_distr::StandardNormal;

const FD_STEP: f64 = 1e-5;

/// Worst relative error per loss family over all checked instances.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub forward_model_nll: f64,
    pub backward_model_nll: f64,
    pub backward_policy_mle: f64,
    pub gan_discriminator: f64,
    pub gan_generator: f64,
    pub sac_critic: f64,
    pub sac_actor: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        [
            self.forward_model_nll,
            self.backward_model_nll,
            self.backward_policy_mle,
            self.gan_discriminator,
            self.gan_generator,
            self.sac_critic,
            self.sac_actor,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn random_vec<R: Rng>(n: usize, lim: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-lim..lim)).collect()
}

/// Eq.-style ensemble NLL instance: a Gaussian head regressing state deltas
/// plus reward. `flip` swaps the conditioning layout (forward vs backward).
fn model_nll_error(seed: u64, flip: bool) -> Result<f64> {
    let mut rng = substream(seed, if flip { "gc-bwd-model" } else { "gc-fwd-model" }, 0);
    let (obs, act) = (3, 2);
    let head = GaussianHead::init(obs + act, obs + 1, &[8, 8], Activation::Relu, (-10.0, 0.5), &mut rng)?;
    let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..6)
        .map(|_| {
            let s = random_vec(obs, 1.0, &mut rng);
            let a = random_vec(act, 1.0, &mut rng);
            let s_other = random_vec(obs, 1.0, &mut rng);
            let r: f64 = rng.random_range(-1.0..1.0);
            let (cond_state, target_state) = if flip { (&s_other, &s) } else { (&s, &s_other) };
            let mut cond = cond_state.clone();
            cond.extend_from_slice(&a);
            let mut target: Vec<f64> = target_state.iter().zip(cond_state.iter()).map(|(o, c)| o - c).collect();
            target.push(r);
            (cond, target)
        })
        .collect();

    let loss_of = |h: &GaussianHead| -> f64 {
        batch
            .iter()
            .map(|(c, t)| gaussian_nll(&h.predict(c).unwrap(), t).unwrap())
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut grads = vec![0.0; head.net().n_params()];
    let mut cache = GaussianCache::default();
    for (c, t) in &batch {
        head.forward_cached(c, &mut cache)?;
        let (mut dm, mut dl) = gaussian_nll_grad(&cache.pred, t);
        let scale = 1.0 / batch.len() as f64;
        dm.iter_mut().for_each(|g| *g *= scale);
        dl.iter_mut().for_each(|g| *g *= scale);
        head.backward(&cache, &dm, &dl, &mut grads, None);
    }
    let base = head.clone();
    let f = |p: &[f64]| {
        let mut h = base.clone();
        h.net_mut().set_params(p).unwrap();
        loss_of(&h)
    };
    let fd = finite_difference_gradient(&f, base.net().params(), FD_STEP);
    Ok(max_relative_error(&grads, &fd))
}

fn mle_error(seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "gc-mle", 0);
    let pol = BackwardPolicy::new(2, &[-2.0], &[2.0], &[8, 8], Activation::Relu, 1e-3, &mut rng)?;
    let batch: Vec<Transition> = (0..6)
        .map(|_| Transition {
            s: vec![0.0, 0.0],
            a: vec![rng.random_range(-1.8..1.8)],
            r: 0.0,
            s_next: random_vec(2, 1.0, &mut rng),
            done: false,
            source: Source::Env,
        })
        .collect();
    let analytic = pol.nll_grad(&batch)?;
    let base = pol.clone();
    let f = |p: &[f64]| {
        let mut q = base.clone();
        q.head_mut().net_mut().set_params(p).unwrap();
        q.nll(&batch).unwrap()
    };
    let fd = finite_difference_gradient(&f, base.head().net().params(), FD_STEP);
    Ok(max_relative_error(&analytic, &fd))
}

fn gan_errors(seed: u64) -> Result<(f64, f64)> {
    let mut rng = substream(seed, "gc-gan", 0);
    let pol = BackwardPolicy::new(2, &[-2.0], &[2.0], &[8, 8], Activation::Relu, 1e-3, &mut rng)?;
    let mut disc = Discriminator::new(2, 1, &[8, 8], Activation::Relu, 1e-3, &mut rng)?;
    let n = disc.net().n_params();
    let params: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
    disc.net_mut().set_params(&params)?;

    let real_data: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
        .map(|_| (vec![rng.random_range(-1.5..1.5)], random_vec(2, 1.0, &mut rng)))
        .collect();
    let fake_data: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
        .map(|_| (vec![rng.random_range(-1.5..1.5)], random_vec(2, 1.0, &mut rng)))
        .collect();
    let reals: Vec<(&[f64], &[f64])> = real_data.iter().map(|(a, s)| (a.as_slice(), s.as_slice())).collect();
    let fakes: Vec<(&[f64], &[f64])> = fake_data.iter().map(|(a, s)| (a.as_slice(), s.as_slice())).collect();

    let analytic_d = disc.bce_grad(&reals, &fakes)?;
    let base_d = disc.clone();
    let f_d = |p: &[f64]| {
        let mut d = base_d.clone();
        d.net_mut().set_params(p).unwrap();
        d.bce(&reals, &fakes).unwrap()
    };
    let fd_d = finite_difference_gradient(&f_d, base_d.net().params(), FD_STEP);
    let d_err = max_relative_error(&analytic_d, &fd_d);

    let states: Vec<Vec<f64>> = fake_data.iter().map(|(_, s)| s.clone()).collect();
    let eps: Vec<Vec<f64>> = (0..states.len()).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let analytic_g = generator_grad(&pol, &disc, &states, &eps)?;
    let base_g = pol.clone();
    let f_g = |p: &[f64]| {
        let mut q = base_g.clone();
        q.head_mut().net_mut().set_params(p).unwrap();
        generator_loss(&q, &disc, &states, &eps).unwrap()
    };
    let fd_g = finite_difference_gradient(&f_g, base_g.head().net().params(), FD_STEP);
    Ok((d_err, max_relative_error(&analytic_g, &fd_g)))
}

fn sac_errors(seed: u64) -> Result<(f64, f64)> {
    let mut rng = substream(seed, "gc-sac", 0);
    let config = SacConfig {
        hidden: vec![8, 8],
        ..SacConfig::default()
    };
    let agent = SacAgent::new(3, 1, &[-2.0], &[2.0], &config, &mut rng)?;
    let batch: Vec<Transition> = (0..6)
        .map(|_| Transition {
            s: random_vec(3, 1.0, &mut rng),
            a: vec![rng.random_range(-2.0..2.0)],
            r: rng.random_range(-2.0..0.0),
            s_next: random_vec(3, 1.0, &mut rng),
            done: false,
            source: Source::Env,
        })
        .collect();

    // Critic: fixed synthetic targets make the loss a pure function of the
    // critic parameters. The analytic side reuses the backward pass through
    // a one-step probe: gradient of mean (q1 - y)^2.
    let targets: Vec<f64> = (0..batch.len()).map(|_| rng.random_range(-3.0..0.0)).collect();
    let mut grads1 = vec![0.0; agent.q1().n_params()];
    {
        use crate::nn::mlp::MlpCache;
        let mut cache = MlpCache::default();
        let n = batch.len() as f64;
        for (t, &y) in batch.iter().zip(&targets) {
            let mut input = t.s.clone();
            input.extend_from_slice(&t.a);
            agent.q1().forward_cached(&input, &mut cache)?;
            let d = cache.output()[0] - y;
            agent.q1().backward(&cache, &[2.0 * d / n], &mut grads1, None);
        }
    }
    let base = agent.clone();
    let f_c = |p: &[f64]| {
        let mut a = base.clone();
        {
            let (q1, _, _, _) = a.q_nets_mut();
            q1.set_params(p).unwrap();
        }
        a.critic_loss_given_targets(&batch, &targets).unwrap().0
    };
    let fd_c = finite_difference_gradient(&f_c, base.q1().params(), FD_STEP);
    let critic_err = max_relative_error(&grads1, &fd_c);

    // Actor: fixed per-sample noise.
    let states: Vec<Vec<f64>> = batch.iter().map(|t| t.s.clone()).collect();
    let eps: Vec<Vec<f64>> = (0..states.len()).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let analytic_a = agent.actor_grad_with_noise(&states, &eps)?;
    let base_a = agent.clone();
    let f_a = |p: &[f64]| {
        let mut a = base_a.clone();
        a.policy_mut().net_mut().set_params(p).unwrap();
        a.actor_loss_with_noise(&states, &eps).unwrap()
    };
    let fd_a = finite_difference_gradient(&f_a, agent.policy_params(), FD_STEP);
    let actor_err = max_relative_error(&analytic_a, &fd_a);
    Ok((critic_err, actor_err))
}

/// Run every gradient check on `instances` random instances each.
pub fn run_gradient_checks(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for i in 0..instances as u64 {
        report.forward_model_nll = report.forward_model_nll.max(model_nll_error(seed + i, false)?);
        report.backward_model_nll = report.backward_model_nll.max(model_nll_error(seed + i, true)?);
        report.backward_policy_mle = report.backward_policy_mle.max(mle_error(seed + i)?);
        let (d, g) = gan_errors(seed + i)?;
        report.gan_discriminator = report.gan_discriminator.max(d);
        report.gan_generator = report.gan_generator.max(g);
        let (c, a) = sac_errors(seed + i)?;
        report.sac_critic = report.sac_critic.max(c);
        report.sac_actor = report.sac_actor.max(a);
    }
    Ok(report)
}
