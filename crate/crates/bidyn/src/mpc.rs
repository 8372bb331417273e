//! Policy-guided model predictive control for environment interaction
//! during training.
//!
//! Each decision samples `N` candidate action sequences from the stochastic
//! policy, simulates each through the forward model with a single member
//! fixed for the whole candidate, scores discounted model rewards plus the
//! discounted soft value of the terminal state, and executes the first
//! action of the best-scoring candidate.

use crate::dynamics::OneStepModel;
use crate::error::{Error, Result};
use crate::policy::SacAgent;
use rand::RngCore;

/// Planner constants. `horizon = 0` or `enabled = false` bypasses planning
/// and defers to the raw stochastic policy.
#[derive(Debug, Clone, Copy)]
pub struct MpcConfig {
    pub horizon: usize,
    pub n_candidates: usize,
    pub enabled: bool,
    /// Action samples used for the terminal soft-value estimate.
    pub value_samples: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 6,
            n_candidates: 50,
            enabled: true,
            value_samples: 1,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::invalid_input("n_candidates must be >= 1"));
        }
        if self.value_samples == 0 {
            return Err(Error::invalid_input("value_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Everything one planning call produced; tests use the per-candidate
/// breakdown to assert the argmax contract.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub action: Vec<f64>,
    pub scores: Vec<f64>,
    pub first_actions: Vec<Vec<f64>>,
    pub best: usize,
}

/// Planner with call-count instrumentation.
#[derive(Debug, Clone)]
pub struct MpcPlanner {
    pub config: MpcConfig,
    calls: u64,
}

impl MpcPlanner {
    pub fn new(config: MpcConfig) -> Result<Self> {
        config.validate()?;
        Ok(MpcPlanner { config, calls: 0 })
    }

    /// Number of times `plan` has been invoked.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// Choose the next environment action from `obs`.
    pub fn plan<M: OneStepModel>(
        &mut self,
        obs: &[f64],
        agent: &SacAgent,
        forward: &M,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        self.calls += 1;
        if !self.config.enabled || self.config.horizon == 0 {
            return agent.act(obs, false, rng);
        }
        Ok(self.plan_detailed(obs, agent, forward, rng)?.action)
    }

    /// Full planning pass with per-candidate diagnostics.
    pub fn plan_detailed<M: OneStepModel>(
        &self,
        obs: &[f64],
        agent: &SacAgent,
        forward: &M,
        rng: &mut dyn RngCore,
    ) -> Result<PlanOutcome> {
        let h = self.config.horizon;
        if h == 0 {
            return Err(Error::precondition("detailed planning requires horizon >= 1"));
        }
        let gamma = agent.gamma;
        let mut scores = Vec::with_capacity(self.config.n_candidates);
        let mut first_actions = Vec::with_capacity(self.config.n_candidates);
        for _ in 0..self.config.n_candidates {
            let member = forward.sample_member(rng)?;
            let mut sim = obs.to_vec();
            let mut score = 0.0;
            let mut discount = 1.0;
            let mut first = None;
            for _ in 0..h {
                let action = agent.act(&sim, false, rng)?;
                let (next, reward) = forward.predict_sample(&sim, &action, Some(member), rng)?;
                if first.is_none() {
                    first = Some(action);
                }
                score += discount * reward;
                discount *= gamma;
                sim = next;
            }
            score += discount * agent.estimate_value(&sim, self.config.value_samples, rng)?;
            scores.push(score);
            first_actions.push(first.expect("horizon >= 1 guarantees a first action"));
        }
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(PlanOutcome {
            action: first_actions[best].clone(),
            scores,
            first_actions,
            best,
        })
    }
}
