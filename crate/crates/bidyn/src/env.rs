//! Continuous-control environment abstraction and a native pendulum
//! swing-up task.
//!
//! Pendulum constants (fixed): gravity 10, mass 1, length 1, dt 0.05,
//! torque clipped to [-2, 2], angular velocity clipped to [-8, 8].
//! Observation is `(cos th, sin th, th_dot)`; the reward on the pre-step
//! state is `-th^2 - 0.1 th_dot^2 - 0.001 |a|^2` with `th` wrapped to
//! [-pi, pi] (upright = 0). Episodes never terminate early; the task
//! horizon is 200 steps. Initial state: `th ~ U[-pi, pi]`,
//! `th_dot ~ U[-1, 1]`.

use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::f64::consts::PI;

/// Static description of an environment's spaces and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub steps_per_epoch: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub has_termination: bool,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.act_dim == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid_input("dimensions and horizon must be >= 1"));
        }
        if self.action_low.len() != self.act_dim || self.action_high.len() != self.act_dim {
            return Err(Error::invalid_input("action bound lengths must equal act_dim"));
        }
        if self
            .action_low
            .iter()
            .zip(self.action_high.iter())
            .any(|(lo, hi)| !(lo < hi))
        {
            return Err(Error::invalid_input("action_low must be < action_high elementwise"));
        }
        Ok(())
    }
}

/// Raw pendulum state, exposed to tests; agents only see observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    /// Angle from upright, wrapped to [-pi, pi].
    pub theta: f64,
    /// Angular velocity, clipped to [-8, 8].
    pub theta_dot: f64,
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Minimal environment interface used by the trainer.
pub trait Env {
    fn spec(&self) -> &EnvSpec;
    /// Reset to a fresh initial state; the same seed yields the same state.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

pub const PENDULUM_GRAVITY: f64 = 10.0;
pub const PENDULUM_MASS: f64 = 1.0;
pub const PENDULUM_LENGTH: f64 = 1.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;

/// Wrap an angle to [-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = (theta + PI) % two_pi;
    if t < 0.0 {
        t += two_pi;
    }
    t - PI
}

/// Reward of taking (already clipped) torque `u` in `state`, evaluated on the
/// pre-step state.
pub fn pendulum_reward(state: PendulumState, u: f64) -> f64 {
    let th = wrap_angle(state.theta);
    -(th * th) - 0.1 * state.theta_dot * state.theta_dot - 0.001 * u * u
}

/// Semi-implicit Euler step of the pendulum dynamics. The torque is clipped
/// internally; returns the next state and the reward on the pre-step state.
pub fn pendulum_step(state: PendulumState, torque: f64) -> (PendulumState, f64) {
    let u = torque.clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
    let reward = pendulum_reward(state, u);
    let g = PENDULUM_GRAVITY;
    let m = PENDULUM_MASS;
    let l = PENDULUM_LENGTH;
    let accel = 3.0 * g / (2.0 * l) * state.theta.sin() + 3.0 / (m * l * l) * u;
    let theta_dot = (state.theta_dot + accel * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    let theta = wrap_angle(state.theta + theta_dot * PENDULUM_DT);
    (PendulumState { theta, theta_dot }, reward)
}

/// Observation `(cos th, sin th, th_dot)`.
pub fn pendulum_observe(state: PendulumState) -> Vec<f64> {
    vec![state.theta.cos(), state.theta.sin(), state.theta_dot]
}

/// The pendulum swing-up environment.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    spec: EnvSpec,
    state: PendulumState,
}

impl PendulumEnv {
    pub fn new() -> Self {
        let spec = EnvSpec {
            obs_dim: 3,
            act_dim: 1,
            steps_per_epoch: 200,
            action_low: vec![-PENDULUM_MAX_TORQUE],
            action_high: vec![PENDULUM_MAX_TORQUE],
            has_termination: false,
        };
        PendulumEnv {
            spec,
            state: PendulumState { theta: PI, theta_dot: 0.0 },
        }
    }

    /// Raw state access for tests and diagnostics.
    pub fn state(&self) -> PendulumState {
        self.state
    }

    pub fn set_state(&mut self, state: PendulumState) {
        self.state = PendulumState {
            theta: wrap_angle(state.theta),
            theta_dot: state.theta_dot.clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED),
        };
    }
}

impl Default for PendulumEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PendulumEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng: ChaCha12Rng = substream(seed, "pendulum-reset", 0);
        let theta = rng.random_range(-PI..PI);
        let theta_dot = rng.random_range(-1.0..1.0);
        self.state = PendulumState { theta, theta_dot };
        pendulum_observe(self.state)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != self.spec.act_dim {
            return Err(Error::invalid_input(format!(
                "action length {} does not match act_dim {}",
                action.len(),
                self.spec.act_dim
            )));
        }
        if !action[0].is_finite() {
            return Err(Error::invalid_input("non-finite action"));
        }
        let (next, reward) = pendulum_step(self.state, action[0]);
        self.state = next;
        Ok(StepResult {
            observation: pendulum_observe(next),
            reward,
            done: false,
        })
    }
}
