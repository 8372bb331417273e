//! Bootstrapped probabilistic dynamics ensembles.
//!
//! Both directions share one implementation: a `Forward` ensemble models
//! `p(s' | s, a)` and a `Backward` ensemble models `q(s | s', a)`. Members
//! predict the state *delta* from the conditioning state plus the step
//! reward, in normalized target space, as a diagonal Gaussian. Training is
//! maximum likelihood on per-member bootstrap resamples with a chronological
//! validation tail, early stopping, per-member best-snapshot restore, and
//! elite selection by validation loss.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::gaussian::{gaussian_nll, gaussian_nll_grad, GaussianCache, GaussianHead};
use crate::nn::mlp::Activation;
use crate::nn::Adam;
use crate::rollout::ReplayBuffer;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

/// Which conditional the ensemble models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn id(self) -> u8 {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Direction::Forward),
            1 => Ok(Direction::Backward),
            _ => Err(Error::Format(format!("unknown direction id {id}"))),
        }
    }
}

/// Anything that can substitute for a one-step dynamics model: the trained
/// ensembles in production, exact maps in tests.
pub trait OneStepModel {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    /// Number of members eligible for sampled predictions.
    fn n_members(&self) -> usize;
    /// Pick the member used for a whole simulated trajectory.
    fn sample_member(&self, rng: &mut dyn RngCore) -> Result<usize>;
    /// Sample `(predicted state, predicted reward)`. `member = None` draws a
    /// uniformly random elite per call.
    fn predict_sample(
        &self,
        cond_state: &[f64],
        action: &[f64],
        member: Option<usize>,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, f64)>;
    /// Deterministic elite-mean prediction.
    fn predict_mean(&self, cond_state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)>;
}

/// Running mean/std feature scaler. Near-constant features keep unit scale.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::precondition("cannot fit a normalizer on no data"));
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows {
            for (s, (&v, &m)) in var.iter_mut().zip(row.iter().zip(mean.iter())) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s < 1e-8 {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }
}

/// Ensemble construction and training constants.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub n_elites: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub log_var_bounds: (f64, f64),
    pub validation_fraction: f64,
    pub patience: usize,
    pub min_train_size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_members: 7,
            n_elites: 5,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            lr: 1e-3,
            batch_size: 64,
            log_var_bounds: (-10.0, 0.5),
            validation_fraction: 0.1,
            patience: 5,
            min_train_size: 32,
        }
    }
}

/// Training outcome: final training loss and the per-member best validation
/// losses (normalized-space Gaussian NLL).
#[derive(Debug, Clone)]
pub struct ModelBatchStats {
    pub train_loss: f64,
    pub validation_loss: Vec<f64>,
    pub passes: usize,
}

impl ModelBatchStats {
    /// Mean validation loss over elite members.
    pub fn elite_validation_loss(&self, elites: &[usize]) -> f64 {
        if elites.is_empty() {
            return f64::NAN;
        }
        elites.iter().map(|&i| self.validation_loss[i]).sum::<f64>() / elites.len() as f64
    }
}

/// Bootstrapped ensemble of Gaussian dynamics members, direction-tagged.
#[derive(Debug, Clone)]
pub struct ProbabilisticEnsemble {
    direction: Direction,
    obs_dim: usize,
    act_dim: usize,
    config: EnsembleConfig,
    members: Vec<GaussianHead>,
    optimizers: Vec<Adam>,
    input_norm: Normalizer,
    target_norm: Normalizer,
    elites: Vec<usize>,
    trained: bool,
}

impl ProbabilisticEnsemble {
    pub fn new<R: Rng>(direction: Direction, obs_dim: usize, act_dim: usize, config: EnsembleConfig, rng: &mut R) -> Result<Self> {
        if config.n_members < 2 {
            return Err(Error::invalid_input("ensemble needs at least 2 members"));
        }
        if config.n_elites == 0 || config.n_elites > config.n_members {
            return Err(Error::invalid_input("elite count must be in 1..=n_members"));
        }
        if !(0.0 < config.validation_fraction && config.validation_fraction < 0.5) {
            return Err(Error::invalid_input("validation fraction must lie in (0, 0.5)"));
        }
        let target_dim = obs_dim + 1;
        let mut members = Vec::with_capacity(config.n_members);
        let mut optimizers = Vec::with_capacity(config.n_members);
        for _ in 0..config.n_members {
            let head = GaussianHead::init(
                obs_dim + act_dim,
                target_dim,
                &config.hidden,
                config.activation,
                config.log_var_bounds,
                rng,
            )?;
            optimizers.push(Adam::new(head.net().n_params()));
            members.push(head);
        }
        Ok(ProbabilisticEnsemble {
            direction,
            obs_dim,
            act_dim,
            config,
            members,
            optimizers,
            input_norm: Normalizer::identity(obs_dim + act_dim),
            target_norm: Normalizer::identity(target_dim),
            elites: Vec::new(),
            trained: false,
        })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn input_norm(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn target_norm(&self) -> &Normalizer {
        &self.target_norm
    }

    /// Test access to member parameters.
    pub fn member(&self, idx: usize) -> &GaussianHead {
        &self.members[idx]
    }

    pub fn member_mut(&mut self, idx: usize) -> &mut GaussianHead {
        &mut self.members[idx]
    }

    /// `(conditioning, target)` for one transition under this direction:
    /// forward maps `(s, a) -> (s' - s, r)`, backward maps
    /// `(s', a) -> (s - s', r)`.
    pub fn training_pair(&self, s: &[f64], a: &[f64], r: f64, s_next: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (cond_state, other) = match self.direction {
            Direction::Forward => (s, s_next),
            Direction::Backward => (s_next, s),
        };
        let mut cond = Vec::with_capacity(self.obs_dim + self.act_dim);
        cond.extend_from_slice(cond_state);
        cond.extend_from_slice(a);
        let mut target = Vec::with_capacity(self.obs_dim + 1);
        for (o, c) in other.iter().zip(cond_state.iter()) {
            target.push(o - c);
        }
        target.push(r);
        (cond, target)
    }

    fn dataset(&self, buffer: &ReplayBuffer) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut inputs = Vec::with_capacity(buffer.len());
        let mut targets = Vec::with_capacity(buffer.len());
        for t in buffer.iter() {
            let (c, y) = self.training_pair(&t.s, &t.a, t.r, &t.s_next);
            inputs.push(c);
            targets.push(y);
        }
        (inputs, targets)
    }

    /// Train every member on its own bootstrap resample; fit normalizers on
    /// all data; early-stop on held-out validation loss and restore each
    /// member's best snapshot; elect elites.
    pub fn train<R: Rng>(&mut self, buffer: &ReplayBuffer, epochs_budget: usize, rng: &mut R) -> Result<ModelBatchStats> {
        if buffer.len() < self.config.min_train_size {
            return Err(Error::precondition(format!(
                "ensemble training needs >= {} transitions, buffer holds {}",
                self.config.min_train_size,
                buffer.len()
            )));
        }
        let (inputs, targets) = self.dataset(buffer);
        self.input_norm = Normalizer::fit(&inputs)?;
        self.target_norm = Normalizer::fit(&targets)?;
        let inputs: Vec<Vec<f64>> = inputs.iter().map(|x| self.input_norm.normalize(x)).collect();
        let targets: Vec<Vec<f64>> = targets.iter().map(|y| self.target_norm.normalize(y)).collect();

        let n = inputs.len();
        let n_val = ((n as f64 * self.config.validation_fraction).ceil() as usize).clamp(1, n - 1);
        let n_train = n - n_val;
        let val_range = n_train..n;

        let b = self.config.n_members;
        // per-member bootstrap resamples of the training block
        let mut boot: Vec<Vec<usize>> = Vec::with_capacity(b);
        for _ in 0..b {
            boot.push((0..n_train).map(|_| rng.random_range(0..n_train)).collect());
        }

        let mut best_val = vec![f64::INFINITY; b];
        let mut best_params: Vec<Vec<f64>> = self.members.iter().map(|m| m.net().params().to_vec()).collect();
        let mut stall = 0usize;
        let mut last_train_loss = f64::NAN;
        let mut passes = 0usize;

        let mut cache = GaussianCache::default();
        let mut order: Vec<usize> = (0..n_train).collect();
        for pass in 0..epochs_budget.max(1) {
            passes = pass + 1;
            let mut pass_loss = 0.0;
            let mut pass_count = 0usize;
            let members = &mut self.members;
            let optimizers = &mut self.optimizers;
            for m in 0..b {
                use rand::seq::SliceRandom;
                for (i, o) in order.iter_mut().enumerate() {
                    *o = i;
                }
                order.shuffle(rng);
                let mut grads = vec![0.0; members[m].net().n_params()];
                for chunk in order.chunks(self.config.batch_size) {
                    grads.iter_mut().for_each(|g| *g = 0.0);
                    let mut batch_loss = 0.0;
                    for &row in chunk {
                        let idx = boot[m][row];
                        members[m].forward_cached(&inputs[idx], &mut cache)?;
                        let nll = gaussian_nll(&cache.pred, &targets[idx])?;
                        batch_loss += nll;
                        let (mut d_mean, mut d_lv) = gaussian_nll_grad(&cache.pred, &targets[idx]);
                        let scale = 1.0 / chunk.len() as f64;
                        d_mean.iter_mut().for_each(|g| *g *= scale);
                        d_lv.iter_mut().for_each(|g| *g *= scale);
                        members[m].backward(&cache, &d_mean, &d_lv, &mut grads, None);
                    }
                    batch_loss /= chunk.len() as f64;
                    if !batch_loss.is_finite() {
                        return Err(Error::numerical(format!(
                            "divergent training loss in member {m} at pass {pass}"
                        )));
                    }
                    pass_loss += batch_loss;
                    pass_count += 1;
                    optimizers[m]
                        .step(members[m].net_mut().params_mut(), &grads, self.config.lr)
                        .map_err(|e| Error::numerical(format!("member {m}: {e}")))?;
                }
            }
            last_train_loss = pass_loss / pass_count.max(1) as f64;

            // validation round
            let mut improved = false;
            for m in 0..b {
                let mut loss = 0.0;
                for idx in val_range.clone() {
                    let pred = self.members[m].predict(&inputs[idx])?;
                    loss += gaussian_nll(&pred, &targets[idx])?;
                }
                loss /= n_val as f64;
                if loss < best_val[m] - 1e-6 {
                    best_val[m] = loss;
                    best_params[m] = self.members[m].net().params().to_vec();
                    improved = true;
                }
            }
            if improved {
                stall = 0;
            } else {
                stall += 1;
                if stall >= self.config.patience {
                    break;
                }
            }
        }

        for (m, params) in best_params.iter().enumerate() {
            self.members[m].net_mut().set_params(params)?;
        }
        let mut ranked: Vec<usize> = (0..b).collect();
        ranked.sort_by(|&i, &j| best_val[i].partial_cmp(&best_val[j]).unwrap());
        self.elites = ranked[..self.config.n_elites].to_vec();
        self.trained = true;
        Ok(ModelBatchStats {
            train_loss: last_train_loss,
            validation_loss: best_val,
            passes,
        })
    }

    /// Per-member mean Gaussian NLL on a holdout slice, no updates.
    pub fn validation_loss(&self, holdout: &[crate::rollout::Transition]) -> Result<Vec<f64>> {
        if holdout.is_empty() {
            return Err(Error::precondition("validation needs a nonempty holdout"));
        }
        let mut losses = vec![0.0; self.members.len()];
        for t in holdout {
            let (c, y) = self.training_pair(&t.s, &t.a, t.r, &t.s_next);
            let c = self.input_norm.normalize(&c);
            let y = self.target_norm.normalize(&y);
            for (m, member) in self.members.iter().enumerate() {
                let pred = member.predict(&c)?;
                losses[m] += gaussian_nll(&pred, &y)?;
            }
        }
        let n = holdout.len() as f64;
        losses.iter_mut().for_each(|l| *l /= n);
        Ok(losses)
    }

    fn check_inputs(&self, cond_state: &[f64], action: &[f64]) -> Result<()> {
        if cond_state.len() != self.obs_dim || action.len() != self.act_dim {
            return Err(Error::invalid_input(format!(
                "conditioning dims ({}, {}) do not match ({}, {})",
                cond_state.len(),
                action.len(),
                self.obs_dim,
                self.act_dim
            )));
        }
        Ok(())
    }

    fn cond_vec(&self, cond_state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.obs_dim + self.act_dim);
        c.extend_from_slice(cond_state);
        c.extend_from_slice(action);
        self.input_norm.normalize(&c)
    }

    /// Turn a denormalized target back into `(state, reward)` relative to
    /// the conditioning state.
    fn resolve_target(&self, cond_state: &[f64], target: &[f64]) -> (Vec<f64>, f64) {
        let state = cond_state.iter().zip(target.iter()).map(|(&s, &d)| s + d).collect();
        (state, target[self.obs_dim])
    }
}

impl OneStepModel for ProbabilisticEnsemble {
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn act_dim(&self) -> usize {
        self.act_dim
    }

    fn n_members(&self) -> usize {
        self.members.len()
    }

    fn sample_member(&self, rng: &mut dyn RngCore) -> Result<usize> {
        if !self.trained {
            return Err(Error::invalid_state("ensemble is not trained"));
        }
        Ok(self.elites[rng.random_range(0..self.elites.len())])
    }

    fn predict_sample(
        &self,
        cond_state: &[f64],
        action: &[f64],
        member: Option<usize>,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, f64)> {
        if !self.trained {
            return Err(Error::invalid_state("ensemble is not trained"));
        }
        self.check_inputs(cond_state, action)?;
        let m = match member {
            Some(i) => {
                if i >= self.members.len() {
                    return Err(Error::invalid_input(format!(
                        "member index {i} out of range (B = {})",
                        self.members.len()
                    )));
                }
                i
            }
            None => self.sample_member(rng)?,
        };
        let pred = self.members[m].predict(&self.cond_vec(cond_state, action))?;
        let z: Vec<f64> = pred
            .mean
            .iter()
            .zip(pred.log_var.iter())
            .map(|(&mu, &lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                mu + (0.5 * lv).exp() * eps
            })
            .collect();
        let target = self.target_norm.denormalize(&z);
        Ok(self.resolve_target(cond_state, &target))
    }

    fn predict_mean(&self, cond_state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
        if !self.trained {
            return Err(Error::invalid_state("ensemble is not trained"));
        }
        self.check_inputs(cond_state, action)?;
        let c = self.cond_vec(cond_state, action);
        let mut mean = vec![0.0; self.obs_dim + 1];
        for &e in &self.elites {
            let pred = self.members[e].predict(&c)?;
            for (acc, &v) in mean.iter_mut().zip(pred.mean.iter()) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= self.elites.len() as f64);
        let target = self.target_norm.denormalize(&mean);
        Ok(self.resolve_target(cond_state, &target))
    }
}

// Checkpoint layout: see `Checkpoint` docs for the byte format; record names
// are namespaced under a caller-chosen prefix.
impl ProbabilisticEnsemble {
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.add_scalar(format!("{prefix}/direction"), self.direction.id() as f64)?;
        ckpt.add(format!("{prefix}/dims"), &[2], &[self.obs_dim as f64, self.act_dim as f64])?;
        ckpt.add_scalar(format!("{prefix}/n_members"), self.members.len() as f64)?;
        ckpt.add_scalar(format!("{prefix}/trained"), if self.trained { 1.0 } else { 0.0 })?;
        let elites: Vec<f64> = self.elites.iter().map(|&e| e as f64).collect();
        ckpt.add(format!("{prefix}/elites"), &[elites.len()], &elites)?;
        ckpt.add(format!("{prefix}/norm/in_mean"), &[self.input_norm.mean.len()], &self.input_norm.mean)?;
        ckpt.add(format!("{prefix}/norm/in_std"), &[self.input_norm.std.len()], &self.input_norm.std)?;
        ckpt.add(format!("{prefix}/norm/t_mean"), &[self.target_norm.mean.len()], &self.target_norm.mean)?;
        ckpt.add(format!("{prefix}/norm/t_std"), &[self.target_norm.std.len()], &self.target_norm.std)?;
        for (i, member) in self.members.iter().enumerate() {
            member.save_into(ckpt, &format!("{prefix}/m{i}"))?;
            let (m, v, t) = self.optimizers[i].state();
            ckpt.add(format!("{prefix}/m{i}/opt/m"), &[m.len()], m)?;
            ckpt.add(format!("{prefix}/m{i}/opt/v"), &[v.len()], v)?;
            ckpt.add_scalar(format!("{prefix}/m{i}/opt/t"), t as f64)?;
        }
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str, config: EnsembleConfig) -> Result<Self> {
        let direction = Direction::from_id(ckpt.scalar(&format!("{prefix}/direction"))? as u8)?;
        let dims = ckpt.get(&format!("{prefix}/dims"))?;
        let (obs_dim, act_dim) = (dims.data[0] as usize, dims.data[1] as usize);
        let n_members = ckpt.scalar(&format!("{prefix}/n_members"))? as usize;
        let mut members = Vec::with_capacity(n_members);
        let mut optimizers = Vec::with_capacity(n_members);
        for i in 0..n_members {
            let head = GaussianHead::load_from(ckpt, &format!("{prefix}/m{i}"))?;
            let mut opt = Adam::new(head.net().n_params());
            let m = ckpt.get(&format!("{prefix}/m{i}/opt/m"))?;
            let v = ckpt.get(&format!("{prefix}/m{i}/opt/v"))?;
            let t = ckpt.scalar(&format!("{prefix}/m{i}/opt/t"))? as u64;
            opt.restore(&m.data, &v.data, t)?;
            optimizers.push(opt);
            members.push(head);
        }
        let elites = ckpt.get(&format!("{prefix}/elites"))?.data.iter().map(|&e| e as usize).collect();
        Ok(ProbabilisticEnsemble {
            direction,
            obs_dim,
            act_dim,
            config,
            members,
            optimizers,
            input_norm: Normalizer {
                mean: ckpt.get(&format!("{prefix}/norm/in_mean"))?.data.clone(),
                std: ckpt.get(&format!("{prefix}/norm/in_std"))?.data.clone(),
            },
            target_norm: Normalizer {
                mean: ckpt.get(&format!("{prefix}/norm/t_mean"))?.data.clone(),
                std: ckpt.get(&format!("{prefix}/norm/t_std"))?.data.clone(),
            },
            elites,
            trained: ckpt.scalar(&format!("{prefix}/trained"))? != 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::rollout::{ReplayBuffer, Source, Transition};

    /// Deterministic linear test system `s' = A s + B a`, reward `r = c's`.
    struct LinearSystem {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
    }

    impl LinearSystem {
        fn new() -> Self {
            LinearSystem {
                a: vec![vec![0.9, 0.10], vec![-0.08, 0.85]],
                b: vec![vec![0.2], vec![-0.1]],
                c: vec![1.0, -0.5],
            }
        }

        fn step(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
            let next: Vec<f64> = (0..2)
                .map(|i| self.a[i][0] * s[0] + self.a[i][1] * s[1] + self.b[i][0] * a[0])
                .collect();
            let r = self.c[0] * s[0] + self.c[1] * s[1];
            (next, r)
        }

        fn invert(&self, s_next: &[f64], a: &[f64]) -> Vec<f64> {
            // closed-form inverse of the 2x2 system
            let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
            let rhs = [
                s_next[0] - self.b[0][0] * a[0],
                s_next[1] - self.b[1][0] * a[0],
            ];
            vec![
                (self.a[1][1] * rhs[0] - self.a[0][1] * rhs[1]) / det,
                (-self.a[1][0] * rhs[0] + self.a[0][0] * rhs[1]) / det,
            ]
        }
    }

    fn linear_buffer(n: usize, seed: u64) -> (ReplayBuffer, LinearSystem) {
        let sys = LinearSystem::new();
        let mut rng = substream(seed, "linear-data", 0);
        let mut buf = ReplayBuffer::new(n);
        for _ in 0..n {
            let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = vec![rng.random_range(-1.0..1.0)];
            let (s_next, r) = sys.step(&s, &a);
            buf.push(Transition {
                s,
                a,
                r,
                s_next,
                done: false,
                source: Source::Env,
            });
        }
        (buf, sys)
    }

    fn small_config() -> EnsembleConfig {
        EnsembleConfig {
            n_members: 3,
            n_elites: 2,
            hidden: vec![48, 48],
            ..EnsembleConfig::default()
        }
    }

    #[test]
    fn forward_ensemble_learns_linear_system() {
        let (buf, sys) = linear_buffer(5000, 21);
        let mut rng = substream(21, "fwd-train", 0);
        let mut ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        ens.train(&buf, 60, &mut rng).unwrap();
        let mut eval_rng = substream(21, "fwd-eval", 0);
        let mut mse = 0.0;
        let n_eval = 500;
        for _ in 0..n_eval {
            let s = vec![eval_rng.random_range(-1.0..1.0), eval_rng.random_range(-1.0..1.0)];
            let a = vec![eval_rng.random_range(-1.0..1.0)];
            let (truth, r_truth) = sys.step(&s, &a);
            let (pred, r_pred) = ens.predict_mean(&s, &a).unwrap();
            mse += pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            mse += (r_pred - r_truth) * (r_pred - r_truth);
        }
        mse /= n_eval as f64;
        assert!(mse < 1e-3, "held-out mse {mse}");
    }

    #[test]
    fn backward_ensemble_learns_inverse_map() {
        let (buf, sys) = linear_buffer(5000, 22);
        let mut rng = substream(22, "bwd-train", 0);
        let mut ens = ProbabilisticEnsemble::new(Direction::Backward, 2, 1, small_config(), &mut rng).unwrap();
        ens.train(&buf, 60, &mut rng).unwrap();
        let mut eval_rng = substream(22, "bwd-eval", 0);
        let mut mse = 0.0;
        let n_eval = 500;
        for _ in 0..n_eval {
            let s = vec![eval_rng.random_range(-1.0..1.0), eval_rng.random_range(-1.0..1.0)];
            let a = vec![eval_rng.random_range(-1.0..1.0)];
            let (s_next, _) = sys.step(&s, &a);
            let truth = sys.invert(&s_next, &a);
            let (pred, _) = ens.predict_mean(&s_next, &a).unwrap();
            mse += pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        }
        mse /= n_eval as f64;
        assert!(mse < 1e-3, "held-out inverse mse {mse}");
    }

    #[test]
    fn empty_buffer_is_precondition_error() {
        let buf = ReplayBuffer::new(16);
        let mut rng = substream(1, "empty", 0);
        let mut ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        assert!(matches!(ens.train(&buf, 10, &mut rng), Err(Error::Precondition(_))));
    }

    #[test]
    fn untrained_prediction_is_state_error() {
        let mut rng = substream(2, "untrained", 0);
        let ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        let mut rng2 = substream(2, "untrained-draw", 0);
        assert!(matches!(
            ens.predict_sample(&[0.0, 0.0], &[0.0], None, &mut rng2),
            Err(Error::InvalidState(_))
        ));
        assert!(matches!(ens.predict_mean(&[0.0, 0.0], &[0.0]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn member_index_out_of_range_is_input_error() {
        let (buf, _) = linear_buffer(200, 23);
        let mut rng = substream(23, "member-range", 0);
        let mut ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        ens.train(&buf, 5, &mut rng).unwrap();
        assert!(matches!(
            ens.predict_sample(&[0.0, 0.0], &[0.0], Some(99), &mut rng),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn variance_floor_makes_samples_match_the_mean() {
        // With log-variance forced far down, sampled predictions collapse
        // onto the member mean.
        let (buf, _) = linear_buffer(400, 24);
        let mut rng = substream(24, "floor", 0);
        let config = EnsembleConfig {
            log_var_bounds: (-60.0, -50.0),
            ..small_config()
        };
        let mut ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, config, &mut rng).unwrap();
        ens.train(&buf, 5, &mut rng).unwrap();
        let s = [0.3, -0.2];
        let a = [0.5];
        let member = Some(ens.elites()[0]);
        let mut draw_rng = substream(24, "floor-draw", 0);
        let (base, base_r) = ens.predict_sample(&s, &a, member, &mut draw_rng).unwrap();
        for _ in 0..5 {
            let (again, again_r) = ens.predict_sample(&s, &a, member, &mut draw_rng).unwrap();
            for (x, y) in again.iter().zip(base.iter()) {
                assert!((x - y).abs() < 1e-4);
            }
            assert!((again_r - base_r).abs() < 1e-4);
        }
    }

    #[test]
    fn validation_loss_on_training_data_not_worse_for_overfit_member() {
        let (buf, _) = linear_buffer(300, 25);
        let mut rng = substream(25, "overfit", 0);
        let mut ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        let stats = ens.train(&buf, 40, &mut rng).unwrap();
        let holdout: Vec<Transition> = buf.iter().cloned().collect();
        let val = ens.validation_loss(&holdout).unwrap();
        // same distribution: full-data loss close to the training-time
        // validation loss for every member
        for (m, &v) in val.iter().enumerate() {
            assert!(
                v <= stats.validation_loss[m] + 1.0,
                "member {m}: holdout {v} vs train-val {}",
                stats.validation_loss[m]
            );
        }
    }

    #[test]
    fn perfect_unit_variance_predictor_scores_zero() {
        // Directly on the NLL: exact mean and log_var = 0 gives loss 0, so a
        // member that nails the targets with unit variance scores 0.
        let pred = crate::nn::GaussianPrediction {
            mean: vec![0.4, -0.7, 0.0],
            log_var: vec![0.0; 3],
        };
        assert_eq!(gaussian_nll(&pred, &[0.4, -0.7, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_holdout_is_precondition_error() {
        let mut rng = substream(3, "holdout", 0);
        let ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        assert!(matches!(ens.validation_loss(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn training_beats_untrained_on_holdout_across_seeds() {
        let mut trained_wins = 0;
        let n_seeds = 20;
        for seed in 0..n_seeds {
            let (buf, _) = linear_buffer(600, 100 + seed);
            let holdout: Vec<Transition> = buf.recent(60).cloned().collect();
            let mut rng = substream(100 + seed, "mc", 0);
            let mut trained = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
            let mut fresh_rng = substream(100 + seed, "mc-fresh", 0);
            let fresh = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut fresh_rng).unwrap();
            trained.train(&buf, 25, &mut rng).unwrap();
            // score untrained members by evaluating NLL with fresh params on
            // the same normalized data as the trained ensemble
            let mut fresh_for_eval = fresh;
            fresh_for_eval.input_norm = trained.input_norm.clone();
            fresh_for_eval.target_norm = trained.target_norm.clone();
            fresh_for_eval.trained = true;
            fresh_for_eval.elites = vec![0];
            let t_loss: f64 = trained.validation_loss(&holdout).unwrap().iter().sum::<f64>() / 3.0;
            let f_loss: f64 = fresh_for_eval.validation_loss(&holdout).unwrap().iter().sum::<f64>() / 3.0;
            if t_loss < f_loss {
                trained_wins += 1;
            }
        }
        assert!(trained_wins >= 19, "trained better in {trained_wins}/{n_seeds} seeds");
    }

    #[test]
    fn bootstrap_resamples_separate_identically_initialized_members() {
        let (buf, _) = linear_buffer(300, 26);
        let mut rng = substream(26, "bootstrap", 0);
        let config = EnsembleConfig {
            n_members: 2,
            n_elites: 1,
            hidden: vec![16, 16],
            ..EnsembleConfig::default()
        };
        let mut ens = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, config, &mut rng).unwrap();
        let shared = ens.member(0).net().params().to_vec();
        ens.member_mut(1).net_mut().set_params(&shared).unwrap();
        ens.train(&buf, 10, &mut rng).unwrap();
        let p0 = ens.member(0).net().params();
        let p1 = ens.member(1).net().params();
        assert!(p0.iter().zip(p1.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn normalizer_round_trip_is_identity() {
        let mut rng = substream(27, "norm", 0);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-3.0..7.0)).collect())
            .collect();
        let norm = Normalizer::fit(&rows).unwrap();
        for row in rows.iter().take(50) {
            let back = norm.denormalize(&norm.normalize(row));
            for (x, y) in back.iter().zip(row.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nll_decomposes_additively_over_heads() {
        // Diagonal NLL over (state dims, reward dim) equals the state-only
        // part plus the reward-only part, so masking one head leaves the
        // other's contribution unchanged.
        let pred = crate::nn::GaussianPrediction {
            mean: vec![0.2, -0.4, 1.0],
            log_var: vec![-0.5, 0.3, 0.1],
        };
        let target = [0.0, 0.1, 0.8];
        let full = gaussian_nll(&pred, &target).unwrap();
        let state_part = gaussian_nll(
            &crate::nn::GaussianPrediction {
                mean: pred.mean[..2].to_vec(),
                log_var: pred.log_var[..2].to_vec(),
            },
            &target[..2],
        )
        .unwrap();
        let reward_part = gaussian_nll(
            &crate::nn::GaussianPrediction {
                mean: pred.mean[2..].to_vec(),
                log_var: pred.log_var[2..].to_vec(),
            },
            &target[2..],
        )
        .unwrap();
        assert!((full - state_part - reward_part).abs() < 1e-12);
    }

    #[test]
    fn forward_backward_round_trip_on_invertible_system() {
        let (buf, _) = linear_buffer(5000, 28);
        let mut rng = substream(28, "roundtrip", 0);
        let mut fwd = ProbabilisticEnsemble::new(Direction::Forward, 2, 1, small_config(), &mut rng).unwrap();
        let mut bwd = ProbabilisticEnsemble::new(Direction::Backward, 2, 1, small_config(), &mut rng).unwrap();
        fwd.train(&buf, 60, &mut rng).unwrap();
        bwd.train(&buf, 60, &mut rng).unwrap();
        let mut err = 0.0;
        let n = 200;
        let mut eval_rng = substream(28, "roundtrip-eval", 0);
        for _ in 0..n {
            let s = vec![eval_rng.random_range(-0.8..0.8), eval_rng.random_range(-0.8..0.8)];
            let a = vec![eval_rng.random_range(-0.8..0.8)];
            let (mid, _) = fwd.predict_mean(&s, &a).unwrap();
            let (back, _) = bwd.predict_mean(&mid, &a).unwrap();
            err += back.iter().zip(s.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        err /= n as f64;
        assert!(err < 5e-3, "round-trip mse {err}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let (buf, _) = linear_buffer(300, 29);
        let mut rng = substream(29, "ckpt", 0);
        let mut ens = ProbabilisticEnsemble::new(Direction::Backward, 2, 1, small_config(), &mut rng).unwrap();
        ens.train(&buf, 10, &mut rng).unwrap();
        let mut ckpt = Checkpoint::new();
        ens.save_into(&mut ckpt, "bwd").unwrap();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let loaded = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let back = ProbabilisticEnsemble::load_from(&loaded, "bwd", small_config()).unwrap();
        assert_eq!(back.direction(), Direction::Backward);
        let (a, ra) = ens.predict_mean(&[0.2, 0.4], &[0.1]).unwrap();
        let (b, rb) = back.predict_mean(&[0.2, 0.4], &[0.1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
