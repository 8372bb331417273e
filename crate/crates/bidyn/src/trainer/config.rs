//! Training configuration: a flat key set loadable from TOML.
//!
//! Every key has a default matching the Pendulum preset, so an empty file is
//! a valid configuration. Schedules appear as four flat keys each
//! (`*_x`, `*_y`, `*_a`, `*_b`): the value ramps linearly from `x` at epoch
//! `a` to `y` at epoch `b` and is clipped outside.

use crate::dynamics::EnsembleConfig;
use crate::error::{Error, Result};
use crate::mpc::MpcConfig;
use crate::nn::mlp::Activation;
use crate::policy::SacConfig;
use crate::rollout::{RolloutConfig, Schedule};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Which components participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Bidirectional rollouts, MPC, everything on.
    Full,
    /// No backward model, no backward policy, k1 forced to zero.
    ForwardOnly,
    /// k2 forced to zero; the forward model is still trained for MPC.
    BackwardOnly,
    /// Bidirectional rollouts without MPC action selection.
    NoMpc,
}

/// Loss used to train the backward policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackwardPolicyLoss {
    Mle,
    Gan,
}

/// All loop constants of a training run. Field names double as the TOML keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,

    // outer loop
    pub n_epochs: usize,
    pub env_steps_per_epoch: usize,
    pub rollouts_per_step: usize,
    pub policy_grad_steps: usize,
    pub backward_policy_steps: usize,

    // SAC
    pub gamma: f64,
    pub tau: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    pub sac_batch_size: usize,
    pub agent_hidden: Vec<usize>,
    /// Fraction of each SAC batch drawn from real environment data.
    pub real_ratio: f64,

    // dynamics models
    pub model_lr: f64,
    pub model_hidden: Vec<usize>,
    pub n_members: usize,
    pub n_elites: usize,
    pub model_batch_size: usize,
    pub model_train_epochs: usize,
    pub model_patience: usize,
    pub validation_fraction: f64,
    /// Environment transitions required before the first model fit.
    pub min_model_train_size: usize,
    /// Uniform-random warmup actions at the start of training.
    pub init_random_steps: usize,

    // backward policy
    pub backward_policy_lr: f64,
    pub backward_policy_loss: BackwardPolicyLoss,
    /// Backward-policy training window, in epochs of recent env data.
    pub recent_window_epochs: usize,

    // buffers
    pub env_buffer_capacity: usize,
    pub model_buffer_capacity: usize,

    // rollout schedules (clipped linear)
    pub k1_x: f64,
    pub k1_y: f64,
    pub k1_a: i64,
    pub k1_b: i64,
    pub k2_x: f64,
    pub k2_y: f64,
    pub k2_a: i64,
    pub k2_b: i64,
    pub beta_x: f64,
    pub beta_y: f64,
    pub beta_a: i64,
    pub beta_b: i64,
    /// Anchor-state candidate pool size for Boltzmann sampling.
    pub candidate_pool: usize,
    /// Action samples per soft-value estimate (Boltzmann weights and MPC
    /// terminal values).
    pub value_samples: usize,

    // MPC
    pub mpc_horizon: usize,
    pub mpc_candidates: usize,

    // evaluation
    pub eval_episodes: usize,
    /// Stop once an evaluation mean reaches this return.
    pub early_stop_return: Option<f64>,

    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            n_epochs: 20,
            env_steps_per_epoch: 200,
            rollouts_per_step: 20,
            policy_grad_steps: 10,
            backward_policy_steps: 1,
            gamma: 0.99,
            tau: 0.005,
            policy_lr: 3e-4,
            q_lr: 3e-4,
            alpha_lr: 3e-4,
            init_alpha: 0.1,
            sac_batch_size: 256,
            agent_hidden: vec![64, 64],
            real_ratio: 0.0,
            model_lr: 1e-3,
            model_hidden: vec![64, 64],
            n_members: 7,
            n_elites: 5,
            model_batch_size: 64,
            model_train_epochs: 200,
            model_patience: 5,
            validation_fraction: 0.1,
            min_model_train_size: 200,
            init_random_steps: 200,
            backward_policy_lr: 1e-3,
            backward_policy_loss: BackwardPolicyLoss::Mle,
            recent_window_epochs: 5,
            env_buffer_capacity: 100_000,
            model_buffer_capacity: 200_000,
            k1_x: 1.0,
            k1_y: 5.0,
            k1_a: 1,
            k1_b: 5,
            k2_x: 1.0,
            k2_y: 5.0,
            k2_a: 1,
            k2_b: 5,
            beta_x: 0.01,
            beta_y: 0.0,
            beta_a: 0,
            beta_b: 10,
            candidate_pool: 1000,
            value_samples: 1,
            mpc_horizon: 6,
            mpc_candidates: 50,
            eval_episodes: 10,
            early_stop_return: None,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid_input("gamma must lie in [0, 1)"));
        }
        if self.n_epochs == 0 || self.env_steps_per_epoch == 0 {
            return Err(Error::invalid_input("epochs and steps per epoch must be >= 1"));
        }
        if self.sac_batch_size == 0 || self.eval_episodes == 0 {
            return Err(Error::invalid_input("batch size and eval episodes must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return Err(Error::invalid_input("real_ratio must lie in [0, 1]"));
        }
        self.k1_schedule()?;
        self.k2_schedule()?;
        self.beta_schedule()?;
        Ok(())
    }

    pub fn k1_schedule(&self) -> Result<Schedule> {
        Schedule::new(self.k1_x, self.k1_y, self.k1_a, self.k1_b)
    }

    pub fn k2_schedule(&self) -> Result<Schedule> {
        Schedule::new(self.k2_x, self.k2_y, self.k2_a, self.k2_b)
    }

    pub fn beta_schedule(&self) -> Result<Schedule> {
        Schedule::new(self.beta_x, self.beta_y, self.beta_a, self.beta_b)
    }

    pub fn rollout_config(&self) -> Result<RolloutConfig> {
        Ok(RolloutConfig {
            k1: self.k1_schedule()?,
            k2: self.k2_schedule()?,
            beta: self.beta_schedule()?,
            rollouts_per_step: self.rollouts_per_step,
            candidate_pool: self.candidate_pool,
        })
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            hidden: self.agent_hidden.clone(),
            activation: Activation::Relu,
            gamma: self.gamma,
            tau: self.tau,
            policy_lr: self.policy_lr,
            q_lr: self.q_lr,
            alpha_lr: self.alpha_lr,
            init_alpha: self.init_alpha,
            target_entropy: None,
            log_std_bounds: (-5.0, 2.0),
        }
    }

    pub fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            n_members: self.n_members,
            n_elites: self.n_elites,
            hidden: self.model_hidden.clone(),
            activation: Activation::Relu,
            lr: self.model_lr,
            batch_size: self.model_batch_size,
            log_var_bounds: (-10.0, 0.5),
            validation_fraction: self.validation_fraction,
            patience: self.model_patience,
            // internal floor; the trainer gates the first fit separately
            min_train_size: self.min_model_train_size.clamp(10, 64),
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            horizon: self.mpc_horizon,
            n_candidates: self.mpc_candidates,
            enabled: self.ablation != Ablation::NoMpc && self.mpc_horizon > 0,
            value_samples: self.value_samples,
        }
    }

    /// Config-file seed, unless `BIDYN_SEED` is set in the environment.
    pub fn resolved_seed(&self) -> Result<u64> {
        match std::env::var("BIDYN_SEED") {
            Ok(raw) => raw
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::invalid_input(format!("BIDYN_SEED is not a u64: {raw:?}"))),
            Err(_) => Ok(self.seed),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: TrainConfig = toml::from_str(&text).map_err(|e| Error::Format(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(format!("{e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
