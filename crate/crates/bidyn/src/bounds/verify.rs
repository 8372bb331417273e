//! Empirical verification of the return-discrepancy bounds on random
//! tabular instances.
//!
//! Every check is exact propagation against an exactly evaluated right-hand
//! side; the only tolerance is the stated truncation allowance plus a small
//! float slack (`1e-9`) for accumulated rounding.

use super::branched::{branched_return, BranchedProcess, SegmentPair};
use super::rhs::{bound_rhs, BoundInputs, BoundVariant};
use super::{expected_kernel_tvd, horizon_for_tail, max_row_tvd, tv_unchecked};
use crate::error::Result;
use crate::rng::substream;
use rand::Rng;
use std::fmt;

pub(crate) const FLOAT_SLACK: f64 = 1e-9;

/// Parameters of a verification run.
#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub n_instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            n_instances: 100,
            max_states: 5,
            max_actions: 3,
            gamma: 0.9,
            seed: 0,
        }
    }
}

/// Expected-TVD error quantities measured between two branched processes,
/// each exactly as it enters the bound: dynamics errors are visitation
/// expectations under process 1 maximized over timesteps, policy errors are
/// suprema over states.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeasuredEpsilons {
    pub eps_m_for: f64,
    pub eps_m_back: f64,
    pub eps_m_pre: f64,
    pub eps_pi_for: f64,
    pub eps_pi_back: f64,
    pub eps_pi_pre: f64,
}

/// Measure the six epsilon quantities over the truncated horizon.
pub fn measure_epsilons(p1: &BranchedProcess, p2: &BranchedProcess, horizon: usize) -> Result<MeasuredEpsilons> {
    let ns = p1.n_states;
    let marg = p1.propagate(horizon)?;
    let mut eps = MeasuredEpsilons {
        eps_pi_for: max_row_tvd(&p1.forward.policy, &p2.forward.policy, p1.n_actions),
        eps_pi_back: max_row_tvd(&p1.backward.policy, &p2.backward.policy, p1.n_actions),
        eps_pi_pre: max_row_tvd(&p1.pre.policy, &p2.pre.policy, p1.n_actions),
        ..Default::default()
    };
    for t in 0..p1.k1 {
        let e = expected_kernel_tvd(&marg.nu[t], &p1.backward.dynamics, &p2.backward.dynamics, ns);
        eps.eps_m_back = eps.eps_m_back.max(e);
    }
    for t in 0..horizon {
        let w = &marg.joint_sa[t];
        eps.eps_m_for = eps
            .eps_m_for
            .max(expected_kernel_tvd(w, &p1.forward.dynamics, &p2.forward.dynamics, ns));
        eps.eps_m_pre = eps
            .eps_m_pre
            .max(expected_kernel_tvd(w, &p1.pre.dynamics, &p2.pre.dynamics, ns));
    }
    Ok(eps)
}

/// One LHS-vs-RHS comparison.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub allowance: f64,
    /// `rhs + allowance - lhs`; negative means violated.
    pub slack: f64,
    pub ok: bool,
}

fn check_bound(
    p1: &BranchedProcess,
    p2: &BranchedProcess,
    reward: &[f64],
    gamma: f64,
    horizon: usize,
    variant: BoundVariant,
) -> Result<BoundCheck> {
    let eta1 = branched_return(p1, reward, gamma, horizon)?;
    let eta2 = branched_return(p2, reward, gamma, horizon)?;
    let eps = measure_epsilons(p1, p2, horizon)?;
    let r_max = reward.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1e-12);
    let inputs = BoundInputs {
        eps_m_for: eps.eps_m_for,
        eps_m_back: eps.eps_m_back,
        eps_m_pre: eps.eps_m_pre,
        eps_pi_for: eps.eps_pi_for,
        eps_pi_back: eps.eps_pi_back,
        eps_pi_pre: eps.eps_pi_pre,
        r_max,
        gamma,
        k1: p1.k1,
        k2: p1.k2,
    };
    let rhs = bound_rhs(&inputs, variant);
    let lhs = (eta1.value - eta2.value).abs();
    let allowance = eta1.tail_bound + eta2.tail_bound;
    let slack = rhs + allowance - lhs;
    Ok(BoundCheck {
        lhs,
        rhs,
        allowance,
        slack,
        ok: lhs <= rhs + allowance + FLOAT_SLACK,
    })
}

pub(crate) fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| -(rng.random::<f64>().max(1e-12)).ln()).collect();
    let sum: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= sum);
    v
}

pub(crate) fn random_kernel<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        out.extend(random_distribution(cols, rng));
    }
    out
}

/// Move `delta` probability mass from each row's largest entry to its
/// smallest, producing a kernel at row TVD exactly `delta` from the input.
/// Requires `delta <= 1 / cols` so every row has the mass available.
pub(crate) fn perturb_kernel(kernel: &[f64], cols: usize, delta: f64) -> Vec<f64> {
    assert!(cols >= 2, "perturbation needs at least two columns");
    let mut out = kernel.to_vec();
    for row in out.chunks_mut(cols) {
        let (mut hi, mut lo) = (0, 0);
        for (i, &v) in row.iter().enumerate() {
            if v > row[hi] {
                hi = i;
            }
            if v < row[lo] {
                lo = i;
            }
        }
        if hi == lo {
            lo = (hi + 1) % cols;
        }
        debug_assert!(row[hi] >= delta);
        row[hi] -= delta;
        row[lo] += delta;
    }
    out
}

fn random_segment<R: Rng>(ns: usize, na: usize, rng: &mut R) -> SegmentPair {
    SegmentPair {
        dynamics: random_kernel(ns * na, ns, rng),
        policy: random_kernel(ns, na, rng),
    }
}

fn perturbed_segment<R: Rng>(seg: &SegmentPair, ns: usize, na: usize, max_delta: f64, rng: &mut R) -> SegmentPair {
    let d_dyn = rng.random_range(0.0..max_delta);
    let d_pi = rng.random_range(0.0..max_delta.min(1.0 / na as f64));
    SegmentPair {
        dynamics: perturb_kernel(&seg.dynamics, ns, d_dyn),
        policy: if na >= 2 {
            perturb_kernel(&seg.policy, na, d_pi)
        } else {
            seg.policy.clone()
        },
    }
}

/// Aggregate results of a verification run.
#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub lemma_checks: usize,
    pub lemma_violations: usize,
    pub lemma_min_slack: f64,
    pub thm_checks: usize,
    pub thm_violations: usize,
    pub thm_min_slack: f64,
    pub joint_tvd_checks: usize,
    pub joint_tvd_violations: usize,
    pub recursion_checks: usize,
    pub recursion_violations: usize,
    pub tightness_grid_points: usize,
    pub tightness_violations: usize,
}

impl VerifyReport {
    pub fn total_violations(&self) -> usize {
        self.lemma_violations
            + self.thm_violations
            + self.joint_tvd_violations
            + self.recursion_violations
            + self.tightness_violations
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "bound verification report")?;
        writeln!(
            f,
            "  instances={} max_states={} max_actions={} gamma={} seed={}",
            self.config.n_instances, self.config.max_states, self.config.max_actions, self.config.gamma, self.config.seed
        )?;
        writeln!(
            f,
            "  branched-rollout returns bound : {} checks, {} violations, worst slack {:.3e}",
            self.lemma_checks, self.lemma_violations, self.lemma_min_slack
        )?;
        writeln!(
            f,
            "  return-discrepancy bound       : {} checks, {} violations, worst slack {:.3e}",
            self.thm_checks, self.thm_violations, self.thm_min_slack
        )?;
        writeln!(
            f,
            "  joint-TVD decomposition        : {} checks, {} violations",
            self.joint_tvd_checks, self.joint_tvd_violations
        )?;
        writeln!(
            f,
            "  backward marginal recursion    : {} checks, {} violations",
            self.recursion_checks, self.recursion_violations
        )?;
        writeln!(
            f,
            "  max(k1,k2) vs k1+k2 tightness  : {} grid points, {} violations",
            self.tightness_grid_points, self.tightness_violations
        )?;
        write!(f, "  total violations: {}", self.total_violations())
    }
}

/// Run the full verification suite: per random instance it checks the
/// general bidirectional bound, the specialized return-discrepancy bound on
/// an instance satisfying its assumptions, the joint-TVD decomposition and
/// the backward marginal recursion, then sweeps the tightness grid.
/// Violations are report content, never panics.
pub fn verify_suite(config: &VerifyConfig) -> Result<VerifyReport> {
    let mut report = VerifyReport {
        config: *config,
        lemma_checks: 0,
        lemma_violations: 0,
        lemma_min_slack: f64::INFINITY,
        thm_checks: 0,
        thm_violations: 0,
        thm_min_slack: f64::INFINITY,
        joint_tvd_checks: 0,
        joint_tvd_violations: 0,
        recursion_checks: 0,
        recursion_violations: 0,
        tightness_grid_points: 0,
        tightness_violations: 0,
    };
    let horizon = horizon_for_tail(config.gamma, 1e-6);

    for inst in 0..config.n_instances {
        let mut rng = substream(config.seed, "verify-instance", inst as u64);
        let ns = rng.random_range(2..=config.max_states.max(2));
        let na = rng.random_range(1..=config.max_actions.max(1));
        let k1 = rng.random_range(0..=4);
        let k2 = rng.random_range(0..=4);
        let anchor = random_distribution(ns, &mut rng);
        let reward: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();

        // (a) general bound on either an independent or a perturbed pair
        let p1 = BranchedProcess {
            n_states: ns,
            n_actions: na,
            anchor: anchor.clone(),
            backward: random_segment(ns, na, &mut rng),
            forward: random_segment(ns, na, &mut rng),
            pre: random_segment(ns, na, &mut rng),
            k1,
            k2,
        };
        let p2 = if inst % 2 == 0 {
            BranchedProcess {
                n_states: ns,
                n_actions: na,
                anchor: anchor.clone(),
                backward: random_segment(ns, na, &mut rng),
                forward: random_segment(ns, na, &mut rng),
                pre: random_segment(ns, na, &mut rng),
                k1,
                k2,
            }
        } else {
            let max_delta = 1.0 / ns as f64;
            BranchedProcess {
                n_states: ns,
                n_actions: na,
                anchor: anchor.clone(),
                backward: perturbed_segment(&p1.backward, ns, na, max_delta, &mut rng),
                forward: perturbed_segment(&p1.forward, ns, na, max_delta, &mut rng),
                pre: perturbed_segment(&p1.pre, ns, na, max_delta, &mut rng),
                k1,
                k2,
            }
        };
        let check = check_bound(&p1, &p2, &reward, config.gamma, horizon, BoundVariant::Lemma41)?;
        report.lemma_checks += 1;
        report.lemma_min_slack = report.lemma_min_slack.min(check.slack);
        if !check.ok {
            report.lemma_violations += 1;
        }

        // (b) specialized bound on an instance satisfying its assumptions:
        // shared pre dynamics, shared branch policies, dynamics perturbed by
        // an equal mass shift in both directions, pre policy shifted.
        let delta_m = rng.random_range(0.0..1.0 / ns as f64);
        let real = BranchedProcess {
            n_states: ns,
            n_actions: na,
            anchor: anchor.clone(),
            backward: random_segment(ns, na, &mut rng),
            forward: random_segment(ns, na, &mut rng),
            pre: random_segment(ns, na, &mut rng),
            k1,
            k2,
        };
        let branch = BranchedProcess {
            n_states: ns,
            n_actions: na,
            anchor,
            backward: SegmentPair {
                dynamics: perturb_kernel(&real.backward.dynamics, ns, delta_m),
                policy: real.backward.policy.clone(),
            },
            forward: SegmentPair {
                dynamics: perturb_kernel(&real.forward.dynamics, ns, delta_m),
                policy: real.forward.policy.clone(),
            },
            pre: SegmentPair {
                dynamics: real.pre.dynamics.clone(),
                policy: if na >= 2 {
                    perturb_kernel(&real.pre.policy, na, rng.random_range(0.0..1.0 / na as f64))
                } else {
                    real.pre.policy.clone()
                },
            },
            k1,
            k2,
        };
        let check = check_bound(&real, &branch, &reward, config.gamma, horizon, BoundVariant::Thm42)?;
        report.thm_checks += 1;
        report.thm_min_slack = report.thm_min_slack.min(check.slack);
        if !check.ok {
            report.thm_violations += 1;
        }

        // (c) joint-TVD decomposition on random discrete distributions
        let nx = rng.random_range(2..=6);
        let ny = rng.random_range(2..=6);
        let px1 = random_distribution(nx, &mut rng);
        let px2 = random_distribution(nx, &mut rng);
        let cond1 = random_kernel(nx, ny, &mut rng);
        let cond2 = random_kernel(nx, ny, &mut rng);
        let mut joint_tvd = 0.0;
        for x in 0..nx {
            for y in 0..ny {
                joint_tvd += (px1[x] * cond1[x * ny + y] - px2[x] * cond2[x * ny + y]).abs();
            }
        }
        joint_tvd *= 0.5;
        let rhs = tv_unchecked(&px1, &px2) + max_row_tvd(&cond1, &cond2, ny);
        report.joint_tvd_checks += 1;
        if joint_tvd > rhs + FLOAT_SLACK {
            report.joint_tvd_violations += 1;
        }

        // (d) backward state-marginal recursion on random backward chains
        let d_next1 = random_distribution(ns, &mut rng);
        let d_next2 = random_distribution(ns, &mut rng);
        let bw1 = random_segment(ns, na, &mut rng);
        let bw2 = random_segment(ns, na, &mut rng);
        let apply_backward = |d_next: &[f64], seg: &SegmentPair| -> (Vec<f64>, Vec<f64>) {
            let mut nu = vec![0.0; ns * na];
            let mut d = vec![0.0; ns];
            for s2 in 0..ns {
                for a in 0..na {
                    let mass = d_next[s2] * seg.policy[s2 * na + a];
                    nu[s2 * na + a] = mass;
                    let row = &seg.dynamics[(s2 * na + a) * ns..(s2 * na + a + 1) * ns];
                    for s in 0..ns {
                        d[s] += mass * row[s];
                    }
                }
            }
            (d, nu)
        };
        let (d1, nu1) = apply_backward(&d_next1, &bw1);
        let (d2, _) = apply_backward(&d_next2, &bw2);
        let eps_m = expected_kernel_tvd(&nu1, &bw1.dynamics, &bw2.dynamics, ns);
        let eps_pi = max_row_tvd(&bw1.policy, &bw2.policy, na);
        let lhs = tv_unchecked(&d1, &d2);
        let rhs = eps_m + eps_pi + tv_unchecked(&d_next1, &d_next2);
        report.recursion_checks += 1;
        if lhs > rhs + FLOAT_SLACK {
            report.recursion_violations += 1;
        }
    }

    // (e) tightness sweep: coefficient max(k1,k2) never exceeds k1+k2 form
    for k1 in 0..=5usize {
        for k2 in 0..=5usize {
            for &gamma in &[0.5, 0.9, 0.99] {
                for &eps_m in &[0.0, 0.05, 0.1] {
                    for &eps_pi in &[0.0, 0.05, 0.1] {
                        let inputs = BoundInputs {
                            eps_m_for: eps_m,
                            eps_m_back: eps_m,
                            eps_m_pre: 0.0,
                            eps_pi_for: 0.0,
                            eps_pi_back: 0.0,
                            eps_pi_pre: eps_pi,
                            r_max: 1.0,
                            gamma,
                            k1,
                            k2,
                        };
                        report.tightness_grid_points += 1;
                        if bound_rhs(&inputs, BoundVariant::Thm42)
                            > bound_rhs(&inputs, BoundVariant::MbpoEq10) + 1e-12
                        {
                            report.tightness_violations += 1;
                        }
                    }
                }
            }
        }
    }

    Ok(report)
}
