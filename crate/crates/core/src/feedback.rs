//! Tracking feedback `k(x, x*)` that pulls the real system toward the nominal
//! one, and empirical contraction-rate fitting.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{Control, State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::sampling::ControlSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    IlqgGains,
    ContractionMetric,
}

/// Quadratic tracking weights, separate from the task cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Evidence that a constant metric contracts the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionCertificate {
    pub metric: DMatrix<f64>,
    pub rate: f64,
    /// Gain multiplier found by the search.
    pub scale: f64,
    /// Worst normalized margin over the check states (≤ 0 means certified).
    pub margin: f64,
    input_matrix: DMatrix<f64>,
    metric_chol_inv: DMatrix<f64>,
}

impl ContractionCertificate {
    /// Largest eigenvalue of `M^{-1/2} (A^T M + M A + 2 λ_c M) M^{-1/2}` for
    /// the closed-loop Jacobian `A` at `x`; the contraction condition holds
    /// there iff it is ≤ 0.
    pub fn margin_at(&self, model: &SystemModel, x: &State, gain: &DMatrix<f64>) -> f64 {
        let (a, _) = model.jacobians(x, &Control::zeros(model.n_u()));
        lmi_margin(&a, &self.input_matrix, gain, &self.metric, self.rate, &self.metric_chol_inv)
    }
}

fn lmi_margin(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    metric: &DMatrix<f64>,
    rate: f64,
    chol_inv: &DMatrix<f64>,
) -> f64 {
    // u = gain * δx, so the closed loop is A + B gain.
    let acl = a + b * gain;
    let s = acl.transpose() * metric + metric * &acl + metric * (2.0 * rate);
    let normalized = chol_inv * s * chol_inv.transpose();
    let sym = (&normalized + normalized.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Linear tracking law `k = sat(K_t (x - x*))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub kind: FeedbackKind,
    /// `n_u x n_x` gains; a single entry is used for every timestep.
    gains: Vec<DMatrix<f64>>,
    u_min: Vec<f64>,
    u_max: Vec<f64>,
    pub certificate: Option<ContractionCertificate>,
}

impl FeedbackPolicy {
    /// All-zero gains: no correction at all.
    pub fn zero(n_u: usize, n_x: usize) -> Self {
        Self {
            kind: FeedbackKind::IlqgGains,
            gains: vec![DMatrix::zeros(n_u, n_x)],
            u_min: vec![f64::NEG_INFINITY; n_u],
            u_max: vec![f64::INFINITY; n_u],
            certificate: None,
        }
    }

    pub fn from_gains(kind: FeedbackKind, gains: Vec<DMatrix<f64>>, model: &SystemModel) -> Result<Self> {
        if gains.is_empty() {
            return Err(Error::Empty("feedback gains"));
        }
        for g in &gains {
            check_dim("gain rows", model.n_u(), g.nrows())?;
            check_dim("gain cols", model.n_x(), g.ncols())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("feedback gains"));
            }
        }
        Ok(Self {
            kind,
            gains,
            u_min: model.u_min.clone(),
            u_max: model.u_max.clone(),
            certificate: None,
        })
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn gain(&self, t: usize) -> &DMatrix<f64> {
        &self.gains[t.min(self.gains.len() - 1)]
    }

    pub fn is_zero(&self) -> bool {
        self.gains.iter().all(|g| g.iter().all(|v| *v == 0.0))
    }

    /// Unclamped `K_t (x - x*)` into `out`.
    pub fn apply_linear_into(&self, x: &[f64], x_star: &[f64], t: usize, out: &mut [f64]) {
        let k = self.gain(t);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..k.ncols() {
                acc += k[(i, j)] * (x[j] - x_star[j]);
            }
            *o = acc;
        }
    }

    pub fn apply_into(&self, x: &[f64], x_star: &[f64], t: usize, out: &mut [f64]) {
        self.apply_linear_into(x, x_star, t, out);
        for ((o, lo), hi) in out.iter_mut().zip(&self.u_min).zip(&self.u_max) {
            *o = o.clamp(*lo, *hi);
        }
    }

    pub fn apply(&self, x: &State, x_star: &State, t: usize) -> Control {
        let mut out = Control::zeros(self.gain(t).nrows());
        self.apply_into(x.as_slice(), x_star.as_slice(), t, out.as_mut_slice());
        out
    }

    /// Contraction condition at `x`, for contraction policies.
    pub fn check_contraction(&self, model: &SystemModel, x: &State) -> Result<f64> {
        let cert = self.certificate.as_ref().ok_or(Error::InvalidParameter {
            name: "feedback",
            reason: "policy has no contraction certificate".into(),
        })?;
        let margin = cert.margin_at(model, x, &self.gains[0]);
        if margin > CONTRACTION_TOL {
            return Err(Error::ContractionViolated {
                state: x.as_slice().to_vec(),
                margin,
            });
        }
        Ok(margin)
    }
}

const CONTRACTION_TOL: f64 = 1e-9;

/// Time-varying LQR gains about a nominal trajectory: one backward Riccati
/// pass over the Euler linearization `x' ≈ A_t x + B_t u`.
pub fn ilqg_gains(
    model: &SystemModel,
    weights: &TrackingWeights,
    nominal: &[State],
    u: &ControlSequence,
) -> Result<FeedbackPolicy> {
    let (n_x, n_u) = (model.n_x(), model.n_u());
    check_dim("nominal trajectory length", u.horizon() + 1, nominal.len())?;
    check_dim("tracking Q", n_x, weights.q.nrows())?;
    check_dim("tracking R", n_u, weights.r.nrows())?;
    let horizon = u.horizon();
    let mut gains = vec![DMatrix::zeros(n_u, n_x); horizon.max(1)];
    let mut p = weights.q.clone();
    for t in (0..horizon).rev() {
        let ut = Control::from_column_slice(u.at(t));
        let (a, b) = model.discrete_jacobians(&nominal[t], &ut);
        let bt_p = b.transpose() * &p;
        let s = &weights.r + &bt_p * &b;
        let chol = s.cholesky().ok_or(Error::RiccatiDivergence { step: t })?;
        let k = chol.solve(&(&bt_p * &a));
        let next = &weights.q + a.transpose() * &p * (&a - &b * &k);
        p = (&next + next.transpose()) * 0.5;
        if p.iter().any(|v| !v.is_finite()) || k.iter().any(|v| !v.is_finite()) {
            return Err(Error::RiccatiDivergence { step: t });
        }
        gains[t] = -k;
    }
    let mut policy = FeedbackPolicy::from_gains(FeedbackKind::IlqgGains, gains, model)?;
    policy.kind = FeedbackKind::IlqgGains;
    Ok(policy)
}

/// Differential feedback for a constant metric `M`: along straight-line
/// geodesics it integrates to `k = -ρ R^{-1} B^T M (x - x*)`. `ρ` is the
/// smallest power of two for which
/// `A_cl^T M + M A_cl ≼ -2 λ_c M` holds at every check state.
///
/// The input matrix must be the same at all check states.
pub fn contraction_feedback(
    metric: &DMatrix<f64>,
    rate: f64,
    r_track: &DMatrix<f64>,
    model: &SystemModel,
    check_states: &[State],
) -> Result<FeedbackPolicy> {
    let (n_x, n_u) = (model.n_x(), model.n_u());
    check_dim("metric", n_x, metric.nrows())?;
    check_dim("metric", n_x, metric.ncols())?;
    check_dim("tracking R", n_u, r_track.nrows())?;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "contraction_rate",
            reason: format!("must be positive, got {rate}"),
        });
    }
    if (metric - metric.transpose()).amax() > 1e-12 * metric.amax().max(1.0) {
        return Err(Error::NotPositiveDefinite("metric is not symmetric"));
    }
    let chol = metric
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("metric"))?;
    let chol_inv = chol
        .l()
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite("metric"))?;
    let r_inv = r_track
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("tracking R"))?
        .inverse();
    let first = check_states.first().ok_or(Error::Empty("contraction check states"))?;
    let zero_u = Control::zeros(n_u);
    let (_, b) = model.jacobians(first, &zero_u);
    let mut jac = Vec::with_capacity(check_states.len());
    for x in check_states {
        let (a, bx) = model.jacobians(x, &zero_u);
        if (&bx - &b).amax() > 1e-9 {
            return Err(Error::InvalidParameter {
                name: "model",
                reason: "constant-metric feedback needs a state-independent input matrix".into(),
            });
        }
        jac.push(a);
    }
    let base = -(&r_inv * b.transpose() * metric);
    let mut worst = (f64::INFINITY, first.clone());
    for j in 0..=20 {
        let scale = f64::powi(2.0, j);
        let gain = &base * scale;
        let (margin, at) = jac
            .iter()
            .zip(check_states)
            .map(|(a, x)| (lmi_margin(a, &b, &gain, metric, rate, &chol_inv), x))
            .fold((f64::NEG_INFINITY, first), |acc, m| if m.0 > acc.0 { m } else { acc });
        if margin <= CONTRACTION_TOL {
            let mut policy =
                FeedbackPolicy::from_gains(FeedbackKind::ContractionMetric, vec![gain], model)?;
            policy.certificate = Some(ContractionCertificate {
                metric: metric.clone(),
                rate,
                scale,
                margin,
                input_matrix: b,
                metric_chol_inv: chol_inv,
            });
            return Ok(policy);
        }
        if margin < worst.0 {
            worst = (margin, at.clone());
        }
    }
    Err(Error::ContractionViolated {
        state: worst.1.as_slice().to_vec(),
        margin: worst.0,
    })
}

/// Per-step contraction factor `γ = exp(-λ_c dt)` implied by a rate.
pub fn gamma_from_rate(rate: f64, dt: f64) -> f64 {
    (-rate * dt).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingReport {
    pub gamma_hat: f64,
    pub residuals: Vec<f64>,
    /// `r_t ≤ γ_hat^t r_0` for every logged `t`.
    pub satisfied: bool,
    /// `γ_hat < 1`.
    pub contracting: bool,
    /// Every residual after the first is exactly zero.
    pub perfect: bool,
}

/// Smallest `γ ∈ [0, 1]` with `r_t ≤ γ^t r_0` for all `t`, i.e.
/// `max_t (r_t / r_0)^{1/t}` clamped to 1.
pub fn fit_gamma(residuals: &[f64]) -> Result<TrackingReport> {
    let r0 = *residuals.first().ok_or(Error::Empty("residuals"))?;
    if residuals.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::NonFinite("residuals"));
    }
    if residuals.iter().all(|r| *r == 0.0) {
        return Ok(TrackingReport {
            gamma_hat: 0.0,
            residuals: residuals.to_vec(),
            satisfied: true,
            contracting: true,
            perfect: true,
        });
    }
    if r0 <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "residuals",
            reason: "first residual must be positive".into(),
        });
    }
    let mut gamma: f64 = 0.0;
    for (t, r) in residuals.iter().enumerate().skip(1) {
        gamma = gamma.max((r / r0).powf(1.0 / t as f64));
    }
    let gamma = gamma.min(1.0);
    let satisfied = residuals
        .iter()
        .enumerate()
        .all(|(t, r)| *r <= gamma.powi(t as i32) * r0 * (1.0 + 1e-12));
    let perfect = residuals[1..].iter().all(|r| *r == 0.0);
    Ok(TrackingReport {
        gamma_hat: gamma,
        residuals: residuals.to_vec(),
        satisfied,
        contracting: gamma < 1.0,
        perfect,
    })
}

/// `γ_hat` over a trailing window, clamped to `[eps, 1 - eps]`. Windows that
/// start at zero carry no rate information and give `1 - eps`.
pub fn windowed_gamma(window: &[f64], eps: f64) -> f64 {
    let hi = 1.0 - eps;
    match window.first() {
        Some(r0) if *r0 > 1e-12 && window.len() >= 2 => match fit_gamma(window) {
            Ok(report) => report.gamma_hat.clamp(eps, hi),
            Err(_) => hi,
        },
        _ => hi,
    }
}

/// Noise-free closed loop of the real system tracking `nominal` from an
/// initial offset, returning `‖x_t - x_t*‖` for each step.
pub fn tracking_residuals(
    model: &SystemModel,
    policy: &FeedbackPolicy,
    x0: &State,
    nominal: &[State],
    u: &ControlSequence,
) -> Vec<f64> {
    let mut x = x0.clone();
    let mut out = vec![(&x - &nominal[0]).norm()];
    let mut k = vec![0.0; model.n_u()];
    let mut next = DVector::zeros(model.n_x());
    for t in 0..u.horizon() {
        policy.apply_into(x.as_slice(), nominal[t].as_slice(), t, &mut k);
        model.step_sum_into(x.as_slice(), &[u.at(t), &k], next.as_mut_slice());
        std::mem::swap(&mut x, &mut next);
        out.push((&x - &nominal[t + 1]).norm());
    }
    out
}
