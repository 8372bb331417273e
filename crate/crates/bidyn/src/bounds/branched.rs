//! Exact returns of plain and bidirectional branched processes.
//!
//! A branched process is anchored at timestep `k1`: the anchor state
//! distribution is shared, timesteps `t < k1` are *generated backward*
//! (action from a backward policy conditioned on the successor state, state
//! from a backward kernel), timesteps `k1 <= t < k1 + k2` follow the forward
//! branch pair, and timesteps `t >= k1 + k2` follow the pre-branch pair.

use super::{check_distribution, TabularMdp, TabularPolicy};
use crate::error::{Error, Result};

/// A (dynamics, policy) pair for one segment.
///
/// For forward-style segments `dynamics[(s * A + a) * S + s']` is
/// `P(s' | s, a)` and `policy[s * A + a]` is `pi(a | s)`. For the backward
/// segment the conditioning flips: `dynamics[(s' * A + a) * S + s]` is
/// `q(s | s', a)` and `policy[s' * A + a]` is `pi~(a | s')`.
#[derive(Debug, Clone)]
pub struct SegmentPair {
    pub dynamics: Vec<f64>,
    pub policy: Vec<f64>,
}

impl SegmentPair {
    fn validate(&self, n_states: usize, n_actions: usize, what: &str) -> Result<()> {
        if self.dynamics.len() != n_states * n_actions * n_states {
            return Err(Error::invalid_input(format!("{what}: dynamics table size mismatch")));
        }
        if self.policy.len() != n_states * n_actions {
            return Err(Error::invalid_input(format!("{what}: policy table size mismatch")));
        }
        for row in 0..n_states * n_actions {
            check_distribution(&self.dynamics[row * n_states..(row + 1) * n_states])
                .map_err(|e| Error::invalid_input(format!("{what}: dynamics row {row}: {e}")))?;
        }
        for s in 0..n_states {
            check_distribution(&self.policy[s * n_actions..(s + 1) * n_actions])
                .map_err(|e| Error::invalid_input(format!("{what}: policy row {s}: {e}")))?;
        }
        Ok(())
    }
}

/// Bidirectional branched process over a finite state/action space.
#[derive(Debug, Clone)]
pub struct BranchedProcess {
    pub n_states: usize,
    pub n_actions: usize,
    /// Shared anchor state distribution, sitting at absolute timestep `k1`.
    pub anchor: Vec<f64>,
    pub backward: SegmentPair,
    pub forward: SegmentPair,
    pub pre: SegmentPair,
    pub k1: usize,
    pub k2: usize,
}

impl BranchedProcess {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::invalid_input("empty state or action space"));
        }
        if self.anchor.len() != self.n_states {
            return Err(Error::invalid_input("anchor length mismatch"));
        }
        check_distribution(&self.anchor).map_err(|e| Error::invalid_input(format!("anchor: {e}")))?;
        self.backward.validate(self.n_states, self.n_actions, "backward")?;
        self.forward.validate(self.n_states, self.n_actions, "forward")?;
        self.pre.validate(self.n_states, self.n_actions, "pre")?;
        Ok(())
    }

    /// Exact marginals of the process up to horizon `t_max` (exclusive).
    pub fn propagate(&self, t_max: usize) -> Result<ProcessMarginals> {
        if t_max <= self.k1 {
            return Err(Error::precondition(format!(
                "horizon {t_max} must exceed the backward branch length {}",
                self.k1
            )));
        }
        let (ns, na) = (self.n_states, self.n_actions);
        let mut state = vec![vec![0.0; ns]; t_max + 1];
        let mut joint_sa = vec![vec![0.0; ns * na]; t_max];
        let mut nu = vec![vec![0.0; ns * na]; self.k1];

        state[self.k1].copy_from_slice(&self.anchor);

        // Backward sweep: nu_t(s', a) = d_{t+1}(s') * pi~(a | s');
        // d_t(s) = sum nu_t(s', a) q(s | s', a).
        for t in (0..self.k1).rev() {
            for s2 in 0..ns {
                let w = state[t + 1][s2];
                for a in 0..na {
                    nu[t][s2 * na + a] = w * self.backward.policy[s2 * na + a];
                }
            }
            for s2 in 0..ns {
                for a in 0..na {
                    let mass = nu[t][s2 * na + a];
                    if mass == 0.0 {
                        continue;
                    }
                    let row = &self.backward.dynamics[(s2 * na + a) * ns..(s2 * na + a + 1) * ns];
                    for s in 0..ns {
                        let add = mass * row[s];
                        state[t][s] += add;
                        joint_sa[t][s * na + a] += add;
                    }
                }
            }
        }

        // Forward sweep from the anchor.
        for t in self.k1..t_max {
            let seg = if t < self.k1 + self.k2 { &self.forward } else { &self.pre };
            for s in 0..ns {
                let w = state[t][s];
                for a in 0..na {
                    joint_sa[t][s * na + a] = w * seg.policy[s * na + a];
                }
            }
            for s in 0..ns {
                for a in 0..na {
                    let mass = joint_sa[t][s * na + a];
                    if mass == 0.0 {
                        continue;
                    }
                    let row = &seg.dynamics[(s * na + a) * ns..(s * na + a + 1) * ns];
                    for s2 in 0..ns {
                        state[t + 1][s2] += mass * row[s2];
                    }
                }
            }
        }

        Ok(ProcessMarginals {
            n_states: ns,
            n_actions: na,
            state,
            joint_sa,
            nu,
        })
    }
}

/// Per-timestep exact marginals of a branched process.
#[derive(Debug, Clone)]
pub struct ProcessMarginals {
    pub n_states: usize,
    pub n_actions: usize,
    /// `state[t][s]`, for `t` in `0..=t_max`.
    pub state: Vec<Vec<f64>>,
    /// Joint over `(s_t, a_t)`, flattened `[s * A + a]`, for `t` in `0..t_max`.
    pub joint_sa: Vec<Vec<f64>>,
    /// Backward joints over `(s_{t+1}, a_t)`, for `t` in `0..k1`.
    pub nu: Vec<Vec<f64>>,
}

/// A truncated expected return plus its truncation tail bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnEstimate {
    pub value: f64,
    /// `r_max * gamma^T / (1 - gamma)`, an upper bound on the dropped tail.
    pub tail_bound: f64,
}

/// Expected discounted return of `policy` on `mdp`, truncated at `horizon`.
pub fn exact_return(mdp: &TabularMdp, policy: &TabularPolicy, horizon: usize) -> Result<ReturnEstimate> {
    if horizon == 0 {
        return Err(Error::precondition("horizon must be >= 1"));
    }
    mdp.validate()?;
    policy.validate()?;
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::invalid_input("policy shape does not match the MDP"));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut d = mdp.rho0.clone();
    let mut next = vec![0.0; ns];
    let mut value = 0.0;
    let mut discount = 1.0;
    for _ in 0..horizon {
        next.iter_mut().for_each(|x| *x = 0.0);
        let mut step_reward = 0.0;
        for s in 0..ns {
            let w = d[s];
            if w == 0.0 {
                continue;
            }
            for a in 0..na {
                let mass = w * policy.probs[s * na + a];
                if mass == 0.0 {
                    continue;
                }
                step_reward += mass * mdp.reward[s * na + a];
                let row = mdp.trans_row(s, a);
                for s2 in 0..ns {
                    next[s2] += mass * row[s2];
                }
            }
        }
        value += discount * step_reward;
        discount *= mdp.gamma;
        std::mem::swap(&mut d, &mut next);
    }
    Ok(ReturnEstimate {
        value,
        tail_bound: mdp.r_max() * discount / (1.0 - mdp.gamma),
    })
}

/// Expected discounted return of a branched process under the reward table
/// `reward[s * A + a]`, truncated at `horizon`.
pub fn branched_return(
    process: &BranchedProcess,
    reward: &[f64],
    gamma: f64,
    horizon: usize,
) -> Result<ReturnEstimate> {
    if horizon == 0 {
        return Err(Error::precondition("horizon must be >= 1"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::invalid_input("gamma must lie in [0, 1)"));
    }
    process.validate()?;
    if reward.len() != process.n_states * process.n_actions {
        return Err(Error::invalid_input("reward table size mismatch"));
    }
    let marg = process.propagate(horizon)?;
    let mut value = 0.0;
    let mut discount = 1.0;
    for t in 0..horizon {
        let step: f64 = marg.joint_sa[t].iter().zip(reward.iter()).map(|(m, r)| m * r).sum();
        value += discount * step;
        discount *= gamma;
    }
    let r_max = reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(ReturnEstimate {
        value,
        tail_bound: r_max * discount / (1.0 - gamma),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::horizon_for_tail;
    use crate::rng::substream;
    use rand::Rng;

    fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
        let sum: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= sum);
        v
    }

    fn random_kernel<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend(random_distribution(cols, rng));
        }
        out
    }

    fn random_mdp<R: Rng>(ns: usize, na: usize, gamma: f64, rng: &mut R) -> (TabularMdp, TabularPolicy) {
        let mdp = TabularMdp {
            n_states: ns,
            n_actions: na,
            transition: random_kernel(ns * na, ns, rng),
            reward: (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect(),
            gamma,
            rho0: random_distribution(ns, rng),
        };
        let policy = TabularPolicy {
            n_states: ns,
            n_actions: na,
            probs: random_kernel(ns, na, rng),
        };
        (mdp, policy)
    }

    #[test]
    fn geometric_series_single_state() {
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![1.0],
            reward: vec![1.0],
            gamma: 0.9,
            rho0: vec![1.0],
        };
        let policy = TabularPolicy { n_states: 1, n_actions: 1, probs: vec![1.0] };
        let est = exact_return(&mdp, &policy, 400).unwrap();
        assert!((est.value - 10.0).abs() <= est.tail_bound + 1e-12);
        assert!(est.tail_bound < 1e-12);
    }

    #[test]
    fn zero_reward_returns_zero() {
        let mut rng = substream(0, "bounds-zero-r", 0);
        let (mut mdp, policy) = random_mdp(4, 2, 0.9, &mut rng);
        mdp.reward.iter_mut().for_each(|r| *r = 0.0);
        let est = exact_return(&mdp, &policy, 100).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn truncation_error_bounded_by_tail() {
        let mut rng = substream(1, "bounds-tail", 0);
        let (mdp, policy) = random_mdp(4, 3, 0.9, &mut rng);
        let t = 60;
        let short = exact_return(&mdp, &policy, t).unwrap();
        let long = exact_return(&mdp, &policy, 2 * t).unwrap();
        assert!((short.value - long.value).abs() <= short.tail_bound + 1e-12);
    }

    #[test]
    fn exact_return_matches_monte_carlo() {
        let mut rng = substream(2, "bounds-mc", 0);
        let (mdp, policy) = random_mdp(4, 2, 0.9, &mut rng);
        let t = 60;
        let exact = exact_return(&mdp, &policy, t).unwrap();

        // naive simulator oracle
        let sample_from = |p: &[f64], u: f64| -> usize {
            let mut acc = 0.0;
            for (i, &w) in p.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        };
        let episodes = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut sim_rng = substream(2, "bounds-mc-sim", 1);
        for _ in 0..episodes {
            let mut s = sample_from(&mdp.rho0, sim_rng.random());
            let mut g = 0.0;
            let mut disc = 1.0;
            for _ in 0..t {
                let a = sample_from(policy.row(s), sim_rng.random());
                g += disc * mdp.reward[s * mdp.n_actions + a];
                disc *= mdp.gamma;
                s = sample_from(mdp.trans_row(s, a), sim_rng.random());
            }
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum / episodes as f64;
        let var = (sum_sq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            (exact.value - mean).abs() <= 3.0 * se,
            "exact {} vs mc {} +- {}",
            exact.value,
            mean,
            se
        );
    }

    fn plain_process(mdp: &TabularMdp, policy: &TabularPolicy, k1: usize, k2: usize, anchor: Vec<f64>) -> BranchedProcess {
        let pair = SegmentPair {
            dynamics: mdp.transition.clone(),
            policy: policy.probs.clone(),
        };
        BranchedProcess {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            anchor,
            backward: pair.clone(),
            forward: pair.clone(),
            pre: pair,
            k1,
            k2,
        }
    }

    #[test]
    fn no_branch_equals_exact_return() {
        // k1 = k2 = 0 with the anchor at rho0: the process is the plain chain
        // under the pre pair.
        let mut rng = substream(3, "bounds-nobranch", 0);
        let (mdp, policy) = random_mdp(5, 3, 0.9, &mut rng);
        let t = horizon_for_tail(0.9, 1e-9);
        let proc = plain_process(&mdp, &policy, 0, 0, mdp.rho0.clone());
        let a = branched_return(&proc, &mdp.reward, mdp.gamma, t).unwrap();
        let b = exact_return(&mdp, &policy, t).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn identical_segment_pairs_single_state_equal_exact_return() {
        // With one state the backward reading of a kernel is trivial, so a
        // branch with all three pairs identical is the plain chain.
        let mdp = TabularMdp {
            n_states: 1,
            n_actions: 2,
            transition: vec![1.0, 1.0],
            reward: vec![0.3, -0.8],
            gamma: 0.9,
            rho0: vec![1.0],
        };
        let policy = TabularPolicy { n_states: 1, n_actions: 2, probs: vec![0.25, 0.75] };
        let t = horizon_for_tail(0.9, 1e-9);
        let proc = plain_process(&mdp, &policy, 2, 3, vec![1.0]);
        let a = branched_return(&proc, &mdp.reward, mdp.gamma, t).unwrap();
        let b = exact_return(&mdp, &policy, t).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn exact_posterior_backward_step_reproduces_plain_chain() {
        // k1 = 1: construct the backward pair as the exact posterior of the
        // (P, pi) chain at t = 0 and anchor at the one-step-forward marginal.
        // The branched process then has the same law as the plain chain, so
        // the returns must agree.
        let mut rng = substream(4, "bounds-posterior", 0);
        let (mdp, policy) = random_mdp(4, 2, 0.9, &mut rng);
        let (ns, na) = (mdp.n_states, mdp.n_actions);

        // joint J(s, a, s') = rho0(s) pi(a|s) P(s'|s,a)
        let mut d1 = vec![0.0; ns];
        let mut joint = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let mass = mdp.rho0[s] * policy.probs[s * na + a];
                let row = mdp.trans_row(s, a);
                for s2 in 0..ns {
                    joint[(s * na + a) * ns + s2] = mass * row[s2];
                    d1[s2] += mass * row[s2];
                }
            }
        }
        // backward policy pi~(a | s') and kernel q(s | s', a)
        let mut bw_policy = vec![0.0; ns * na];
        let mut bw_kernel = vec![0.0; ns * na * ns];
        for s2 in 0..ns {
            for a in 0..na {
                let mass_a: f64 = (0..ns).map(|s| joint[(s * na + a) * ns + s2]).sum();
                bw_policy[s2 * na + a] = mass_a / d1[s2];
                for s in 0..ns {
                    bw_kernel[(s2 * na + a) * ns + s] = if mass_a > 0.0 {
                        joint[(s * na + a) * ns + s2] / mass_a
                    } else if s == 0 {
                        1.0
                    } else {
                        0.0
                    };
                }
            }
        }
        // renormalize rows against accumulated float error
        for row in 0..ns * na {
            let sum: f64 = bw_kernel[row * ns..(row + 1) * ns].iter().sum();
            bw_kernel[row * ns..(row + 1) * ns].iter_mut().for_each(|x| *x /= sum);
        }
        for s2 in 0..ns {
            let sum: f64 = bw_policy[s2 * na..(s2 + 1) * na].iter().sum();
            bw_policy[s2 * na..(s2 + 1) * na].iter_mut().for_each(|x| *x /= sum);
        }

        let fwd_pair = SegmentPair {
            dynamics: mdp.transition.clone(),
            policy: policy.probs.clone(),
        };
        let proc = BranchedProcess {
            n_states: ns,
            n_actions: na,
            anchor: d1,
            backward: SegmentPair { dynamics: bw_kernel, policy: bw_policy },
            forward: fwd_pair.clone(),
            pre: fwd_pair,
            k1: 1,
            k2: 2,
        };
        let t = horizon_for_tail(0.9, 1e-9);
        let a = branched_return(&proc, &mdp.reward, mdp.gamma, t).unwrap();
        let b = exact_return(&mdp, &policy, t).unwrap();
        assert!(
            (a.value - b.value).abs() < 1e-9,
            "branched {} vs plain {}",
            a.value,
            b.value
        );
    }

    #[test]
    fn branched_return_matches_monte_carlo() {
        let mut rng = substream(5, "bounds-branch-mc", 0);
        let (mdp, policy) = random_mdp(3, 2, 0.9, &mut rng);
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let proc = BranchedProcess {
            n_states: ns,
            n_actions: na,
            anchor: random_distribution(ns, &mut rng),
            backward: SegmentPair {
                dynamics: random_kernel(ns * na, ns, &mut rng),
                policy: random_kernel(ns, na, &mut rng),
            },
            forward: SegmentPair {
                dynamics: random_kernel(ns * na, ns, &mut rng),
                policy: random_kernel(ns, na, &mut rng),
            },
            pre: SegmentPair {
                dynamics: mdp.transition.clone(),
                policy: policy.probs.clone(),
            },
            k1: 2,
            k2: 2,
        };
        let t = 50;
        let exact = branched_return(&proc, &mdp.reward, mdp.gamma, t).unwrap();

        let sample_from = |p: &[f64], u: f64| -> usize {
            let mut acc = 0.0;
            for (i, &w) in p.iter().enumerate() {
                acc += w;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        };
        let episodes = 200_000;
        let mut sim_rng = substream(5, "bounds-branch-mc-sim", 1);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..episodes {
            // backward leg from the anchor
            let anchor = sample_from(&proc.anchor, sim_rng.random());
            let mut states = vec![0usize; t + 1];
            let mut actions = vec![0usize; t];
            states[proc.k1] = anchor;
            for step in (0..proc.k1).rev() {
                let s2 = states[step + 1];
                let a = sample_from(&proc.backward.policy[s2 * na..(s2 + 1) * na], sim_rng.random());
                let s = sample_from(
                    &proc.backward.dynamics[(s2 * na + a) * ns..(s2 * na + a + 1) * ns],
                    sim_rng.random(),
                );
                actions[step] = a;
                states[step] = s;
            }
            for step in proc.k1..t {
                let seg = if step < proc.k1 + proc.k2 { &proc.forward } else { &proc.pre };
                let s = states[step];
                let a = sample_from(&seg.policy[s * na..(s + 1) * na], sim_rng.random());
                let s2 = sample_from(&seg.dynamics[(s * na + a) * ns..(s * na + a + 1) * ns], sim_rng.random());
                actions[step] = a;
                states[step + 1] = s2;
            }
            let mut g = 0.0;
            let mut disc = 1.0;
            for step in 0..t {
                g += disc * mdp.reward[states[step] * na + actions[step]];
                disc *= mdp.gamma;
            }
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum / episodes as f64;
        let var = (sum_sq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            (exact.value - mean).abs() <= 3.0 * se,
            "exact {} vs mc {} +- {}",
            exact.value,
            mean,
            se
        );
    }

    #[test]
    fn invalid_rows_are_input_errors() {
        let mdp = TabularMdp {
            n_states: 2,
            n_actions: 1,
            transition: vec![0.7, 0.7, 0.5, 0.5],
            reward: vec![0.0, 0.0],
            gamma: 0.9,
            rho0: vec![1.0, 0.0],
        };
        let policy = TabularPolicy { n_states: 2, n_actions: 1, probs: vec![1.0, 1.0] };
        assert!(matches!(exact_return(&mdp, &policy, 10), Err(Error::InvalidInput(_))));
    }
}
