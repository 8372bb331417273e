//! Right-hand sides of the return-discrepancy bounds.

use crate::error::{Error, Result};

/// The error and horizon quantities entering the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub eps_m_for: f64,
    pub eps_m_back: f64,
    pub eps_m_pre: f64,
    pub eps_pi_for: f64,
    pub eps_pi_back: f64,
    pub eps_pi_pre: f64,
    pub r_max: f64,
    pub gamma: f64,
    pub k1: usize,
    pub k2: usize,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let eps = [
            self.eps_m_for,
            self.eps_m_back,
            self.eps_m_pre,
            self.eps_pi_for,
            self.eps_pi_back,
            self.eps_pi_pre,
        ];
        if eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::invalid_input("all epsilon inputs must be finite and >= 0"));
        }
        if !(self.r_max.is_finite() && self.r_max > 0.0) {
            return Err(Error::invalid_input("r_max must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid_input("gamma must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Which bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundVariant {
    /// General bidirectional branched-rollout bound with all six epsilons.
    Lemma41,
    /// Return-discrepancy bound with model-error coefficient `max(k1, k2)`.
    /// Uses `eps_pi_pre` as the policy shift and `max(eps_m_for, eps_m_back)`
    /// as the common model error.
    Thm42,
    /// Forward-only comparison bound with coefficient `k1 + k2`.
    MbpoEq10,
}

/// Evaluate the chosen bound right-hand side exactly as printed.
pub fn bound_rhs(inputs: &BoundInputs, variant: BoundVariant) -> f64 {
    let g = inputs.gamma;
    let (k1, k2) = (inputs.k1 as f64, inputs.k2 as f64);
    let one_minus = 1.0 - g;
    let g_k1 = g.powi(inputs.k1 as i32);
    let g_k12 = g.powi((inputs.k1 + inputs.k2) as i32);
    match variant {
        BoundVariant::Lemma41 => {
            let pre = g_k12 * g / (one_minus * one_minus) * (inputs.eps_m_pre + inputs.eps_pi_pre)
                + g_k12 / one_minus * inputs.eps_pi_pre;
            let back = (1.0 - g_k1) / one_minus
                * (k1 * (inputs.eps_m_back + inputs.eps_pi_back) + inputs.eps_pi_back);
            let fwd = g_k1 / one_minus * (k2 * (inputs.eps_m_for + inputs.eps_pi_for) + inputs.eps_pi_for);
            2.0 * inputs.r_max * (pre + back + fwd)
        }
        BoundVariant::Thm42 | BoundVariant::MbpoEq10 => {
            let eps_pi = inputs.eps_pi_pre;
            let eps_m = inputs.eps_m_for.max(inputs.eps_m_back);
            let coeff = if variant == BoundVariant::Thm42 { k1.max(k2) } else { k1 + k2 };
            2.0 * inputs.r_max
                * (g_k12 * g * eps_pi / (one_minus * one_minus)
                    + g_k12 * eps_pi / one_minus
                    + coeff * eps_m / one_minus)
        }
    }
}
