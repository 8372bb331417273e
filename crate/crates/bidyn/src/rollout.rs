//! Replay buffers, clipped-linear schedules, Boltzmann anchor-state
//! sampling and bidirectional branched rollout generation.

use crate::dynamics::OneStepModel;
use crate::error::{Error, Result};
use crate::policy::{BackwardPolicy, SacAgent};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Where a transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Env,
    ModelForward,
    ModelBackward,
}

/// One environment or model step; the unit of replay.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub source: Source,
}

/// Bounded FIFO of transitions with deterministic iteration order.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of insertions over the buffer's lifetime.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Oldest-first access.
    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// The most recent `n` transitions, oldest first.
    pub fn recent(&self, n: usize) -> impl Iterator<Item = &Transition> {
        let skip = self.items.len().saturating_sub(n);
        self.items.iter().skip(skip)
    }

    /// Uniform sample of `n` indices with replacement.
    pub fn sample_indices<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::precondition("cannot sample from an empty buffer"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }
}

/// Clipped linear interpolation from `x` at epoch `a` to `y` at epoch `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub x: f64,
    pub y: f64,
    pub a: i64,
    pub b: i64,
}

impl Schedule {
    pub fn new(x: f64, y: f64, a: i64, b: i64) -> Result<Self> {
        if a >= b {
            return Err(Error::invalid_input("schedule requires a < b"));
        }
        Ok(Schedule { x, y, a, b })
    }

    pub fn constant(v: f64) -> Self {
        Schedule { x: v, y: v, a: 0, b: 1 }
    }
}

/// Value of the schedule at `epoch`: linear between the endpoints, clipped to
/// the closed interval between `x` and `y` outside `[a, b]`.
pub fn schedule_value(schedule: &Schedule, epoch: i64) -> f64 {
    if epoch <= schedule.a {
        return schedule.x;
    }
    if epoch >= schedule.b {
        return schedule.y;
    }
    let t = (epoch - schedule.a) as f64 / (schedule.b - schedule.a) as f64;
    schedule.x + t * (schedule.y - schedule.x)
}

/// Rollout lengths are schedule values floored to integers, and at least one
/// once the ramp has started.
pub fn schedule_steps(schedule: &Schedule, epoch: i64) -> usize {
    let v = schedule_value(schedule, epoch);
    let k = v.floor().max(0.0) as usize;
    if epoch >= schedule.a {
        k.max(1)
    } else {
        k
    }
}

/// Rollout generation constants: anchor-length schedules, the Boltzmann
/// temperature schedule, rollouts per environment step and the size of the
/// candidate pool that anchor states are drawn from.
#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub k1: Schedule,
    pub k2: Schedule,
    pub beta: Schedule,
    pub rollouts_per_step: usize,
    pub candidate_pool: usize,
}

/// Draw `n` anchor states (with replacement) from the buffer with
/// probabilities `softmax(beta * V(s))` over a uniformly chosen candidate
/// pool. `beta = 0` degenerates to uniform sampling and skips the value
/// function entirely.
pub fn boltzmann_sample_states<R: Rng, F: FnMut(&[f64]) -> f64>(
    buffer: &ReplayBuffer,
    mut value_fn: F,
    beta: f64,
    n: usize,
    candidate_pool: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if buffer.is_empty() {
        return Err(Error::precondition("state sampling needs a nonempty buffer"));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::invalid_input("beta must be finite and >= 0"));
    }
    let len = buffer.len();
    let pool: Vec<usize> = if len <= candidate_pool.max(1) {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, candidate_pool).into_vec()
    };
    if beta == 0.0 {
        return Ok((0..n)
            .map(|_| buffer.get(pool[rng.random_range(0..pool.len())]).s.clone())
            .collect());
    }
    let values: Vec<f64> = pool.iter().map(|&i| value_fn(&buffer.get(i).s)).collect();
    let max_v = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values.iter().map(|&v| (beta * (v - max_v)).exp()).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::numerical(format!("boltzmann weights rejected: {e}")))?;
    Ok((0..n).map(|_| buffer.get(pool[dist.sample(rng)]).s.clone()).collect())
}

/// Generate one bidirectional branched rollout anchored at `start_state`:
/// `k1` backward steps driven by the backward policy and backward model,
/// then `k2` forward steps driven by the agent and forward model. Backward
/// transitions are emitted walking away from the anchor, each chaining onto
/// the previous; none of the emitted transitions terminate.
pub fn bidirectional_rollout<MF, MB, R>(
    start_state: &[f64],
    k1: usize,
    k2: usize,
    forward: &MF,
    backward: &MB,
    agent: &SacAgent,
    backward_policy: &BackwardPolicy,
    rng: &mut R,
) -> Result<Vec<Transition>>
where
    MF: OneStepModel,
    MB: OneStepModel,
    R: Rng,
{
    if k1 + k2 == 0 {
        return Err(Error::precondition("rollout needs k1 + k2 >= 1"));
    }
    let mut out = Vec::with_capacity(k1 + k2);
    let mut cur = start_state.to_vec();
    for _ in 0..k1 {
        let action = backward_policy.sample_action(&cur, rng)?;
        let (prev, reward) = backward.predict_sample(&cur, &action, None, rng)?;
        out.push(Transition {
            s: prev.clone(),
            a: action,
            r: reward,
            s_next: cur,
            done: false,
            source: Source::ModelBackward,
        });
        cur = prev;
    }
    let mut s = start_state.to_vec();
    for _ in 0..k2 {
        let action = agent.act(&s, false, rng)?;
        let (next, reward) = forward.predict_sample(&s, &action, None, rng)?;
        out.push(Transition {
            s,
            a: action,
            r: reward,
            s_next: next.clone(),
            done: false,
            source: Source::ModelForward,
        });
        s = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn transition(tag: f64) -> Transition {
        Transition {
            s: vec![tag],
            a: vec![0.0],
            r: 0.0,
            s_next: vec![tag + 0.5],
            done: false,
            source: Source::Env,
        }
    }

    #[test]
    fn buffer_fifo_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(transition(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let tags: Vec<f64> = buf.iter().map(|t| t.s[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
        assert_eq!(buf.inserted(), 5);
    }

    #[test]
    fn recent_returns_tail_in_order() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..6 {
            buf.push(transition(i as f64));
        }
        let tags: Vec<f64> = buf.recent(2).map(|t| t.s[0]).collect();
        assert_eq!(tags, vec![4.0, 5.0]);
    }

    #[test]
    fn empty_buffer_sampling_is_precondition_error() {
        let buf = ReplayBuffer::new(4);
        let mut rng = substream(0, "buf", 0);
        assert!(matches!(buf.sample_indices(3, &mut rng), Err(Error::Precondition(_))));
        assert!(matches!(
            boltzmann_sample_states(&buf, |_| 0.0, 0.0, 3, 10, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn pendulum_k1_schedule_rows() {
        let k1 = Schedule::new(1.0, 5.0, 1, 5).unwrap();
        assert_eq!(schedule_value(&k1, 0), 1.0);
        assert_eq!(schedule_value(&k1, 3), 3.0);
        assert_eq!(schedule_value(&k1, 100), 5.0);
        assert_eq!(schedule_steps(&k1, 0), 1);
        assert_eq!(schedule_steps(&k1, 3), 3);
        assert_eq!(schedule_steps(&k1, 100), 5);
    }

    #[test]
    fn beta_schedule_decreasing_row() {
        let beta = Schedule::new(0.01, 0.0, 0, 10).unwrap();
        assert_eq!(schedule_value(&beta, 0), 0.01);
        assert!((schedule_value(&beta, 5) - 0.005).abs() < 1e-15);
        assert_eq!(schedule_value(&beta, 100), 0.0);
    }

    #[test]
    fn uniform_limit_at_beta_zero() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..4 {
            buf.push(transition(i as f64));
        }
        let mut rng = substream(1, "boltzmann-uniform", 0);
        let draws = boltzmann_sample_states(&buf, |_| unreachable!("beta=0 must not evaluate V"), 0.0, 10_000, 100, &mut rng)
            .unwrap();
        let mut counts = [0usize; 4];
        for d in &draws {
            counts[d[0] as usize] += 1;
        }
        // chi-square with 3 dof; 0.01 critical value is 11.34
        let expected = 2500.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 11.34, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn large_beta_concentrates_on_argmax() {
        let mut buf = ReplayBuffer::new(8);
        for i in 0..4 {
            buf.push(transition(i as f64));
        }
        let mut rng = substream(2, "boltzmann-argmax", 0);
        let draws = boltzmann_sample_states(&buf, |s| s[0], 200.0, 2000, 100, &mut rng).unwrap();
        let top = draws.iter().filter(|d| d[0] == 3.0).count();
        assert!(top as f64 / 2000.0 > 0.999, "top fraction {}", top as f64 / 2000.0);
    }

    #[test]
    fn hand_evaluated_two_state_softmax() {
        // values (0, ln 2) at beta = 1 give probabilities (1/3, 2/3)
        let mut buf = ReplayBuffer::new(4);
        buf.push(transition(0.0));
        buf.push(transition(1.0));
        let value = |s: &[f64]| if s[0] == 0.0 { 0.0 } else { 2.0f64.ln() };
        let mut rng = substream(3, "boltzmann-softmax", 0);
        let n = 30_000;
        let draws = boltzmann_sample_states(&buf, value, 1.0, n, 100, &mut rng).unwrap();
        let ones = draws.iter().filter(|d| d[0] == 1.0).count() as f64 / n as f64;
        // 4-sigma band around 2/3 with n = 30k draws
        let sigma = (2.0 / 9.0f64 / n as f64).sqrt();
        assert!((ones - 2.0 / 3.0).abs() < 4.0 * sigma, "freq {ones}");
    }

    proptest! {
        #[test]
        fn buffer_keeps_exactly_the_newest(capacity in 1usize..50, extra in 0usize..50) {
            let mut buf = ReplayBuffer::new(capacity);
            let total = capacity + extra;
            for i in 0..total {
                buf.push(transition(i as f64));
            }
            prop_assert_eq!(buf.len(), capacity);
            let tags: Vec<f64> = buf.iter().map(|t| t.s[0]).collect();
            let expect: Vec<f64> = (total - capacity..total).map(|i| i as f64).collect();
            prop_assert_eq!(tags, expect);
        }

        #[test]
        fn schedule_is_clipped_and_monotone(
            x in -5.0..5.0f64,
            y in -5.0..5.0f64,
            a in -10i64..10,
            len in 1i64..20,
            e1 in -30i64..40,
            e2 in -30i64..40,
        ) {
            let s = Schedule::new(x, y, a, a + len).unwrap();
            let lo = x.min(y);
            let hi = x.max(y);
            for e in [e1, e2] {
                let v = schedule_value(&s, e);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
            prop_assert_eq!(schedule_value(&s, a - 1), x);
            prop_assert_eq!(schedule_value(&s, a + len + 1), y);
            // monotone between the endpoints in the direction of y - x
            let (e_lo, e_hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let (v_lo, v_hi) = (schedule_value(&s, e_lo), schedule_value(&s, e_hi));
            if y >= x {
                prop_assert!(v_hi >= v_lo - 1e-12);
            } else {
                prop_assert!(v_hi <= v_lo + 1e-12);
            }
        }
    }
}
