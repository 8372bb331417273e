//! Bidirectional model-based policy optimization.
//!
//! The crate trains forward and backward probabilistic dynamics ensembles on
//! a native pendulum swing-up task, generates bidirectional branched rollouts
//! from value-weighted anchor states to feed a soft actor-critic learner,
//! plans environment actions with policy-guided MPC during training, and
//! numerically verifies branched-rollout return-discrepancy bounds on exact
//! tabular MDPs.

pub mod bounds;
pub mod checkpoint;
pub mod dynamics;
pub mod env;
pub mod error;
// pub mod mpc;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod rollout;
// pub mod trainer;

pub use error::{Error, Result};
