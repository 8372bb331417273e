//! Exact tabular machinery for return-discrepancy bounds.
//!
//! Finite MDPs are propagated exactly (no sampling), which makes every
//! quantity in the branched-rollout bounds — returns, visitation marginals,
//! total-variation distances — computable to floating-point precision.

mod branched;
mod rhs;
mod verify;

pub use branched::{branched_return, exact_return, BranchedProcess, ProcessMarginals, ReturnEstimate, SegmentPair};
pub use rhs::{bound_rhs, BoundInputs, BoundVariant};
pub use verify::{measure_epsilons, verify_suite, MeasuredEpsilons, VerifyConfig, VerifyReport};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// Exact finite MDP `(S, A, M*, r, gamma, rho0)`.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-stochastic transition tensor, flattened as `[(s * A + a) * S + s']`.
    pub transition: Vec<f64>,
    /// Reward table `[s * A + a]` with `|r| <= r_max`.
    pub reward: Vec<f64>,
    pub gamma: f64,
    /// Initial state distribution.
    pub rho0: Vec<f64>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(Error::invalid_input("n_states and n_actions must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid_input("gamma must lie in [0, 1)"));
        }
        if self.transition.len() != s * a * s || self.reward.len() != s * a || self.rho0.len() != s {
            return Err(Error::invalid_input("table sizes inconsistent with n_states/n_actions"));
        }
        for row in 0..s * a {
            check_distribution(&self.transition[row * s..(row + 1) * s])
                .map_err(|e| Error::invalid_input(format!("transition row {row}: {e}")))?;
        }
        check_distribution(&self.rho0).map_err(|e| Error::invalid_input(format!("rho0: {e}")))?;
        Ok(())
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    #[inline]
    pub fn trans_row(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.transition[off..off + self.n_states]
    }
}

/// Stochastic policy table `pi[s * A + a]`, rows summing to one.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.probs.len() != self.n_states * self.n_actions {
            return Err(Error::invalid_input("policy table size mismatch"));
        }
        for srow in 0..self.n_states {
            check_distribution(&self.probs[srow * self.n_actions..(srow + 1) * self.n_actions])
                .map_err(|e| Error::invalid_input(format!("policy row {srow}: {e}")))?;
        }
        Ok(())
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

pub(crate) fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
        return Err("contains negative or non-finite entries".to_string());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("sums to {sum}, expected 1 within {ROW_SUM_TOL}"));
    }
    Ok(())
}

/// Total variation distance `0.5 * sum |p - q|` between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid_input("tv_distance: length mismatch"));
    }
    check_distribution(p).map_err(Error::InvalidInput)?;
    check_distribution(q).map_err(Error::InvalidInput)?;
    Ok(tv_unchecked(p, q))
}

#[inline]
pub(crate) fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Expected row TVD between two conditional kernels under `weights` over the
/// conditioning variable: `sum_i w_i * D_TV(k1[i] || k2[i])`.
///
/// `weights` need not sum to one exactly (propagated marginals carry float
/// error); rows are `cols` wide.
pub fn expected_kernel_tvd(weights: &[f64], k1: &[f64], k2: &[f64], cols: usize) -> f64 {
    debug_assert_eq!(k1.len(), k2.len());
    debug_assert_eq!(weights.len() * cols, k1.len());
    weights
        .iter()
        .enumerate()
        .map(|(i, &w)| w * tv_unchecked(&k1[i * cols..(i + 1) * cols], &k2[i * cols..(i + 1) * cols]))
        .sum()
}

/// Max over conditioning rows of the row TVD (the sup form used for policy
/// divergences in the bounds).
pub fn max_row_tvd(k1: &[f64], k2: &[f64], cols: usize) -> f64 {
    debug_assert_eq!(k1.len(), k2.len());
    let rows = k1.len() / cols;
    (0..rows)
        .map(|i| tv_unchecked(&k1[i * cols..(i + 1) * cols], &k2[i * cols..(i + 1) * cols]))
        .fold(0.0, f64::max)
}

/// Smallest horizon `T` with relative tail `gamma^T / (1 - gamma) < rel_tail`.
pub fn horizon_for_tail(gamma: f64, rel_tail: f64) -> usize {
    assert!((0.0..1.0).contains(&gamma) && rel_tail > 0.0);
    if gamma == 0.0 {
        return 1;
    }
    let t = ((rel_tail * (1.0 - gamma)).ln() / gamma.ln()).ceil();
    (t.max(1.0) as usize).min(100_000)
}
