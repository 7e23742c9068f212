//! Robust MPPI: the augmented (real, nominal) sampler, its mixed cost and
//! importance weights, nominal-state selection, the free-energy growth bound,
//! and the MPPI / Tube-MPPI / RMPPI controllers built on them.

pub mod ais;
pub mod controller;
pub mod nsp;

use serde::Serialize;

use crate::costs::ControlCovariance;
use crate::dynamics::{Control, State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::sampling::ControlSequence;

pub use ais::{augmented_is, AugmentedRollout};
pub use controller::{
    Controller, ControllerKind, ControllerSettings, Diagnostics, FeedbackSpec, MppiController,
    RmppiController, StepOutput, StepStatus, TubeController,
};
pub use nsp::{candidate_states, nominal_state_propagation, NominalDecision};

/// `½ S* + ½ max(min(Ŝ, α), S*)`.
///
/// For nonnegative costs this is `≤ α` exactly when `S* ≤ α`.
pub fn mixed_cost(s_star: f64, s_hat: f64, alpha: f64) -> f64 {
    0.5 * s_star + 0.5 * s_hat.min(alpha).max(s_star)
}

/// `S + λ(1-β)/2 Σ_t k_t^T Σ^{-1} k_t`: the real-system cost penalized by the
/// feedback effort it needed.
pub fn s_hat(state_cost: f64, feedback: &ControlSequence, lambda: f64, beta: f64, sigma: &ControlCovariance) -> f64 {
    let c = lambda * (1.0 - beta) / 2.0;
    let mut penalty = 0.0;
    for t in 0..feedback.horizon() {
        let k = feedback.at(t);
        penalty += sigma.inner(k, k);
    }
    state_cost + c * penalty
}

/// Radon–Nikodym derivative of the uncontrolled distribution with respect to
/// the feedback-augmented sampling distribution:
///
/// `exp(-½ Σ_t (u_t + k_t)^T Σ^{-1} (u_t + k_t + 2 ε_t))`.
pub fn augmented_is_weight(
    u: &ControlSequence,
    k: &ControlSequence,
    eps: &ControlSequence,
    sigma: &ControlCovariance,
) -> Result<f64> {
    check_dim("augmented weight feedback", u.horizon(), k.horizon())?;
    check_dim("augmented weight noise", u.horizon(), eps.horizon())?;
    let n_u = u.n_u();
    let mut m = vec![0.0; n_u];
    let mut m2e = vec![0.0; n_u];
    let mut exponent = 0.0;
    for t in 0..u.horizon() {
        for i in 0..n_u {
            m[i] = u.at(t)[i] + k.at(t)[i];
            m2e[i] = m[i] + 2.0 * eps.at(t)[i];
        }
        exponent += sigma.inner(&m, &m2e);
    }
    Ok((-0.5 * exponent).exp())
}

/// Every constant of the free-energy growth bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundParams {
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub l_q: f64,
    pub l_phi: f64,
    /// Bound on the Monte-Carlo variation of free-energy estimates.
    pub emv: f64,
    /// Bound on the additive state disturbance.
    pub d: f64,
    pub horizon: usize,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.alpha > 0.0) || self.alpha.is_nan() {
            return bad("alpha", "must be positive");
        }
        if !(self.emv >= 0.0 && self.emv.is_finite()) {
            return bad("emv", "must be finite and nonnegative");
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return bad("d", "must be finite and nonnegative");
        }
        if !(self.l_q >= 0.0 && self.l_q.is_finite() && self.l_phi >= 0.0 && self.l_phi.is_finite()) {
            return bad("lipschitz", "constants must be finite and nonnegative");
        }
        Ok(())
    }

    /// `L_φ γ^T + L_q (1 - γ^T) / (1 - γ)`.
    pub fn tracking_factor(&self) -> f64 {
        let gt = self.gamma.powi(self.horizon as i32);
        self.l_phi * gt + self.l_q * (1.0 - gt) / (1.0 - self.gamma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthBound {
    /// With `D` added to the state distance.
    pub value: f64,
    /// Distance term without `D`.
    pub value_without_d: f64,
    pub tracking_factor: f64,
    pub distance: f64,
}

/// Upper bound on the one-step growth of the real system's estimated free
/// energy:
///
/// `(α - F_nom) + 2 E + (L_φ γ^T + L_q (1-γ^T)/(1-γ)) D_F`,
///
/// with `D_F = ‖f(x_0, u) - x_0‖ + ‖x_0* - x_0‖ + D`, `f` the one-step map.
pub fn free_energy_growth_bound(
    params: &BoundParams,
    model: &SystemModel,
    x0: &State,
    x0_star: &State,
    u: &Control,
    fe_nominal: f64,
) -> Result<GrowthBound> {
    params.validate()?;
    let moved = (model.step(x0, u)? - x0).norm();
    check_dim("bound nominal state", x0.len(), x0_star.len())?;
    let offset = (x0_star - x0).norm();
    let factor = params.tracking_factor();
    let head = (params.alpha - fe_nominal) + 2.0 * params.emv;
    let distance = moved + offset + params.d;
    Ok(GrowthBound {
        value: head + factor * distance,
        value_without_d: head + factor * (moved + offset),
        tracking_factor: factor,
        distance,
    })
}
