use std::borrow::Cow;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::costs::{ControlCostScale, CostFunction};
use crate::dynamics::{Control, State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::feedback::{gamma_from_rate, ilqg_gains, windowed_gamma, FeedbackKind, FeedbackPolicy, TrackingWeights};
use crate::rng::stream;
use crate::sampling::{
    free_energy_mc, mppi_update, rollout_batch, rollout_batch_scaled, savitzky_golay, softmax_weights,
    weighted_noise_at, ControlSequence, NoisePlan,
};

use super::{
    augmented_is, free_energy_growth_bound, nominal_state_propagation, BoundParams, GrowthBound, NominalDecision,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Mppi,
    Tube,
    Rmppi,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Mppi => "mppi",
            ControllerKind::Tube => "tube",
            ControllerKind::Rmppi => "rmppi",
        }
    }
}

/// Where the tracking feedback comes from.
#[derive(Debug, Clone)]
pub enum FeedbackSpec {
    None,
    /// Riccati gains recomputed about the nominal trajectory every step.
    Ilqg(TrackingWeights),
    /// A fixed policy, e.g. from [`crate::feedback::contraction_feedback`].
    Fixed(FeedbackPolicy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    pub samples: usize,
    pub horizon: usize,
    pub seed: u64,
    pub alpha: f64,
    pub crash_cost: f64,
    pub nsp_candidates: usize,
    pub nsp_samples: usize,
    pub emv_repeats: usize,
    /// Multiplier on the spread of repeated free-energy estimates.
    pub emv_scale: f64,
    pub gamma_window: usize,
    pub gamma_eps: f64,
    pub smoothing: bool,
    /// Assumed bound on the state disturbance, for the growth bound.
    pub disturbance_bound: f64,
    pub l_q: f64,
    pub l_phi: f64,
}

impl Default for ControllerSettings {
    fn default() -> Self {
        Self {
            samples: 256,
            horizon: 30,
            seed: 0,
            alpha: 1000.0,
            crash_cost: 1000.0,
            nsp_candidates: 8,
            nsp_samples: 32,
            emv_repeats: 8,
            emv_scale: 3.0,
            gamma_window: 20,
            gamma_eps: 1e-3,
            smoothing: false,
            disturbance_bound: 0.0,
            l_q: 0.0,
            l_phi: 0.0,
        }
    }
}

impl ControllerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if self.samples == 0 {
            return bad("samples", "must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        if self.nsp_samples == 0 {
            return bad("nsp_samples", "must be at least 1");
        }
        if self.nsp_candidates < 2 {
            return bad("nsp_candidates", "must be at least 2");
        }
        if self.emv_repeats < 2 {
            return bad("emv_repeats", "must be at least 2");
        }
        if !(self.gamma_eps > 0.0 && self.gamma_eps < 0.5) {
            return bad("gamma_eps", "must lie in (0, 0.5)");
        }
        if self.alpha.is_nan() || !self.crash_cost.is_finite() {
            return bad("alpha", "alpha must not be NaN and crash_cost must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    /// Every sample crashed; the previous plan was used unchanged.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub fe_real: f64,
    pub fe_nom: f64,
    pub cand_idx: Option<usize>,
    pub gamma_hat: Option<f64>,
    pub emv: Option<f64>,
    /// Bound on the growth from this step to the next.
    pub bound: Option<GrowthBound>,
    pub nominal: Option<State>,
    /// Tube-MPPI only: whether the nominal was reset to the real state.
    pub reset: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub action: Control,
    pub diagnostics: Diagnostics,
    pub status: StepStatus,
}

pub trait Controller: Send {
    fn kind(&self) -> ControllerKind;

    /// One receding-horizon step from the measured state `x` at step index `k`.
    fn step(&mut self, x: &State, k: u64) -> Result<StepOutput>;

    /// The importance-sampling sequence carried into the next step.
    fn controls(&self) -> &ControlSequence;

    /// The most recent updated sequence, before any shift.
    fn last_update(&self) -> Option<&ControlSequence>;
}

fn saturated(model: &SystemModel, mut u: Vec<f64>) -> Control {
    model.saturate(&mut u);
    Control::from_vec(u)
}

fn finish_update(settings: &ControllerSettings, u: ControlSequence) -> ControlSequence {
    if settings.smoothing {
        savitzky_golay(&u)
    } else {
        u
    }
}

fn policy_for<'a>(
    model: &SystemModel,
    spec: &'a FeedbackSpec,
    x_star: &State,
    u: &ControlSequence,
) -> Result<Cow<'a, FeedbackPolicy>> {
    match spec {
        FeedbackSpec::None => Ok(Cow::Owned(FeedbackPolicy::zero(model.n_u(), model.n_x()))),
        FeedbackSpec::Ilqg(w) => {
            let nominal = model.rollout(x_star, u);
            Ok(Cow::Owned(ilqg_gains(model, w, &nominal, u)?))
        }
        FeedbackSpec::Fixed(p) => Ok(Cow::Borrowed(p)),
    }
}

/// Vanilla MPPI: one importance-sampled update per step from the measured
/// state.
pub struct MppiController {
    model: SystemModel,
    cost: CostFunction,
    settings: ControllerSettings,
    u: ControlSequence,
    last: Option<ControlSequence>,
}

impl MppiController {
    pub fn new(model: SystemModel, cost: CostFunction, settings: ControllerSettings) -> Result<Self> {
        settings.validate()?;
        check_dim("cost control dim", model.n_u(), cost.n_u())?;
        let u = ControlSequence::zeros(settings.horizon, model.n_u());
        Ok(Self {
            model,
            cost,
            settings,
            u,
            last: None,
        })
    }
}

impl Controller for MppiController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Mppi
    }

    fn step(&mut self, x: &State, k: u64) -> Result<StepOutput> {
        let s = &self.settings;
        let plan = NoisePlan::generate(s.seed, stream::CONTROLLER, k, s.samples, s.horizon, &self.cost.sigma);
        let batch = rollout_batch(&self.model, &self.cost, x, &self.u, &plan, s.crash_cost)?;
        let fe = free_energy_mc(&batch.costs, self.cost.lambda)?.value;
        let (updated, status) = if batch.all_crashed() {
            (self.u.clone(), StepStatus::Degenerate)
        } else {
            let w = softmax_weights(&batch.costs, self.cost.lambda)?;
            (finish_update(s, mppi_update(&self.u, &w, &plan)?), StepStatus::Ok)
        };
        let action = saturated(&self.model, updated.at(0).to_vec());
        self.u = updated.shifted();
        self.last = Some(updated);
        Ok(StepOutput {
            action,
            diagnostics: Diagnostics {
                fe_real: fe,
                fe_nom: f64::NAN,
                ..Default::default()
            },
            status,
        })
    }

    fn controls(&self) -> &ControlSequence {
        &self.u
    }

    fn last_update(&self) -> Option<&ControlSequence> {
        self.last.as_ref()
    }
}

/// Tube-MPPI: MPPI on a disturbance-free nominal copy, with tracking
/// feedback on the real system and a reset of the nominal to the real state
/// whenever their free energies differ by less than `alpha`.
pub struct TubeController {
    model: SystemModel,
    cost: CostFunction,
    settings: ControllerSettings,
    feedback: FeedbackSpec,
    u: ControlSequence,
    x_star: Option<State>,
    last: Option<ControlSequence>,
}

impl TubeController {
    pub fn new(
        model: SystemModel,
        cost: CostFunction,
        settings: ControllerSettings,
        feedback: FeedbackSpec,
    ) -> Result<Self> {
        settings.validate()?;
        check_dim("cost control dim", model.n_u(), cost.n_u())?;
        let u = ControlSequence::zeros(settings.horizon, model.n_u());
        Ok(Self {
            model,
            cost,
            settings,
            feedback,
            u,
            x_star: None,
            last: None,
        })
    }

    pub fn nominal_state(&self) -> Option<&State> {
        self.x_star.as_ref()
    }

    pub fn set_nominal_state(&mut self, x_star: State) {
        self.x_star = Some(x_star);
    }
}

impl Controller for TubeController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Tube
    }

    fn step(&mut self, x: &State, k: u64) -> Result<StepOutput> {
        let s = &self.settings;
        let lambda = self.cost.lambda;
        let x_star = self.x_star.take().unwrap_or_else(|| x.clone());
        let plan = NoisePlan::generate(s.seed, stream::CONTROLLER, k, s.samples, s.horizon, &self.cost.sigma);
        let nominal = rollout_batch(&self.model, &self.cost, &x_star, &self.u, &plan, s.crash_cost)?;
        let real = rollout_batch(&self.model, &self.cost, x, &self.u, &plan, s.crash_cost)?;
        let fe_nom = free_energy_mc(&nominal.costs, lambda)?.value;
        let fe_real = free_energy_mc(&real.costs, lambda)?.value;
        let reset = fe_real - fe_nom < s.alpha;
        let (anchor, batch) = if reset { (x.clone(), &real) } else { (x_star, &nominal) };
        let (updated, status) = if batch.all_crashed() {
            (self.u.clone(), StepStatus::Degenerate)
        } else {
            let w = softmax_weights(&batch.costs, lambda)?;
            (finish_update(s, mppi_update(&self.u, &w, &plan)?), StepStatus::Ok)
        };
        let policy = policy_for(&self.model, &self.feedback, &anchor, &updated)?;
        let k_fb = policy.apply(x, &anchor, 0);
        let action = saturated(
            &self.model,
            updated.at(0).iter().zip(k_fb.iter()).map(|(u, k)| u + k).collect(),
        );
        let next = self.model.step(&anchor, &Control::from_column_slice(updated.at(0)))?;
        self.u = updated.shifted();
        self.last = Some(updated);
        self.x_star = Some(next);
        Ok(StepOutput {
            action,
            diagnostics: Diagnostics {
                fe_real,
                fe_nom,
                nominal: Some(anchor),
                reset: Some(reset),
                ..Default::default()
            },
            status,
        })
    }

    fn controls(&self) -> &ControlSequence {
        &self.u
    }

    fn last_update(&self) -> Option<&ControlSequence> {
        self.last.as_ref()
    }
}

/// Robust MPPI: nominal-state selection, then the augmented sampler drives
/// both the real-system action and the nominal importance sampler.
pub struct RmppiController {
    model: SystemModel,
    cost: CostFunction,
    settings: ControllerSettings,
    feedback: FeedbackSpec,
    u: ControlSequence,
    x_prev: Option<State>,
    residuals: VecDeque<f64>,
    last: Option<ControlSequence>,
}

impl RmppiController {
    pub fn new(
        model: SystemModel,
        cost: CostFunction,
        settings: ControllerSettings,
        feedback: FeedbackSpec,
    ) -> Result<Self> {
        settings.validate()?;
        check_dim("cost control dim", model.n_u(), cost.n_u())?;
        if let FeedbackSpec::Fixed(p) = &feedback {
            check_dim("feedback rows", model.n_u(), p.gain(0).nrows())?;
            check_dim("feedback cols", model.n_x(), p.gain(0).ncols())?;
        }
        let u = ControlSequence::zeros(settings.horizon, model.n_u());
        Ok(Self {
            model,
            cost,
            settings,
            feedback,
            u,
            x_prev: None,
            residuals: VecDeque::new(),
            last: None,
        })
    }

    pub fn nominal_state(&self) -> Option<&State> {
        self.x_prev.as_ref()
    }

    fn initial_decision(&self, x: &State, plan: &NoisePlan) -> Result<NominalDecision> {
        let s = &self.settings;
        let batch = rollout_batch_scaled(
            &self.model,
            &self.cost,
            x,
            &self.u,
            plan,
            s.crash_cost,
            ControlCostScale::Smoothed,
        )?;
        let fe = free_energy_mc(&batch.costs, self.cost.lambda)?.value;
        let r = s.nsp_candidates;
        Ok(NominalDecision {
            chosen_index: r,
            candidates: vec![x.as_slice().to_vec(); r + 1],
            free_energies: vec![fe; r + 1],
            feasible: vec![fe <= s.alpha; r + 1],
            controls: self.u.clone(),
        })
    }

    /// Per-step contraction factor used by the growth bound.
    fn gamma(&mut self, residual: f64) -> f64 {
        let s = &self.settings;
        if let FeedbackSpec::Fixed(p) = &self.feedback {
            if p.kind == FeedbackKind::ContractionMetric {
                if let Some(cert) = &p.certificate {
                    return gamma_from_rate(cert.rate, self.model.dt);
                }
            }
        }
        self.residuals.push_back(residual);
        while self.residuals.len() > s.gamma_window {
            self.residuals.pop_front();
        }
        windowed_gamma(self.residuals.make_contiguous(), s.gamma_eps)
    }

    fn emv(&self, x_star: &State, u: &ControlSequence, k: u64) -> Result<f64> {
        let s = &self.settings;
        let reps = s.emv_repeats as u64;
        let mut estimates = Vec::with_capacity(s.emv_repeats);
        for r in 0..reps {
            let plan = NoisePlan::generate(s.seed, stream::EMV, k * reps + r, s.nsp_samples, s.horizon, &self.cost.sigma);
            let batch = rollout_batch_scaled(
                &self.model,
                &self.cost,
                x_star,
                u,
                &plan,
                s.crash_cost,
                ControlCostScale::Smoothed,
            )?;
            estimates.push(free_energy_mc(&batch.costs, self.cost.lambda)?.value);
        }
        let n = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        let var = estimates.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / (n - 1.0);
        Ok(s.emv_scale * var.sqrt())
    }
}

impl Controller for RmppiController {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Rmppi
    }

    fn step(&mut self, x: &State, k: u64) -> Result<StepOutput> {
        check_dim("rmppi state", self.model.n_x(), x.len())?;
        let s = self.settings.clone();
        let lambda = self.cost.lambda;
        let nsp_plan = NoisePlan::generate(s.seed, stream::NSP, k, s.nsp_samples, s.horizon, &self.cost.sigma);
        let (decision, prop) = match self.x_prev.take() {
            Some(x_prev) => {
                let prop = self.model.step(&x_prev, &Control::from_column_slice(self.u.at(0)))?;
                let decision = nominal_state_propagation(
                    &self.model,
                    &self.cost,
                    x,
                    &x_prev,
                    &prop,
                    &self.u,
                    s.nsp_candidates,
                    &nsp_plan,
                    s.alpha,
                    s.crash_cost,
                )?;
                (decision, prop)
            }
            // No previous nominal yet: start it at the measured state.
            None => (self.initial_decision(x, &nsp_plan)?, x.clone()),
        };
        let x_star = decision.chosen_state();
        let u = decision.controls.clone();

        let policy = policy_for(&self.model, &self.feedback, &x_star, &u)?;
        let plan = NoisePlan::generate(s.seed, stream::CONTROLLER, k, s.samples, s.horizon, &self.cost.sigma);
        let aug = augmented_is(&self.model, &self.cost, x, &x_star, &u, &policy, &plan, s.alpha, s.crash_cost)?;
        let fe_real = free_energy_mc(&aug.real, lambda)?.value;
        let k_fb = policy.apply(x, &x_star, 0);

        let (action, updated, status) = if aug.all_crashed() {
            let a: Vec<f64> = u.at(0).iter().zip(k_fb.iter()).map(|(u, k)| u + k).collect();
            (saturated(&self.model, a), u.clone(), StepStatus::Degenerate)
        } else {
            let w_real = softmax_weights(&aug.real, lambda)?;
            let eps0 = weighted_noise_at(&w_real, &plan, 0);
            let a: Vec<f64> = (0..self.model.n_u()).map(|i| u.at(0)[i] + k_fb[i] + eps0[i]).collect();
            let w_nom = softmax_weights(&aug.nominal, lambda)?;
            let updated = finish_update(&s, mppi_update(&u, &w_nom, &plan)?);
            (saturated(&self.model, a), updated, StepStatus::Ok)
        };
        drop(policy);

        let fe_nom = decision.chosen_free_energy();
        let emv = self.emv(&x_star, &u, k)?;
        let gamma = self.gamma((x - &prop).norm());
        let params = BoundParams {
            alpha: s.alpha,
            lambda,
            beta: self.cost.beta,
            gamma,
            l_q: s.l_q,
            l_phi: s.l_phi,
            emv,
            d: s.disturbance_bound,
            horizon: s.horizon,
        };
        let bound = free_energy_growth_bound(&params, &self.model, x, &x_star, &action, fe_nom)?;

        self.u = updated.clone();
        self.last = Some(updated);
        self.x_prev = Some(x_star.clone());
        Ok(StepOutput {
            action,
            diagnostics: Diagnostics {
                fe_real,
                fe_nom,
                cand_idx: Some(decision.chosen_index),
                gamma_hat: Some(gamma),
                emv: Some(emv),
                bound: Some(bound),
                nominal: Some(x_star),
                reset: None,
            },
            status,
        })
    }

    fn controls(&self) -> &ControlSequence {
        &self.u
    }

    fn last_update(&self) -> Option<&ControlSequence> {
        self.last.as_ref()
    }
}
