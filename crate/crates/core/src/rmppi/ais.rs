use crate::costs::{control_cost_term, ControlCostScale, CostFunction};
use crate::dynamics::{State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::feedback::FeedbackPolicy;
use crate::sampling::{map_samples, ControlSequence, NoisePlan};

use super::mixed_cost;

/// Per-sample costs of the augmented sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRollout {
    /// Nominal-system state cost `S_n`.
    pub nominal_state: Vec<f64>,
    /// Real-system state cost plus feedback penalty `Ŝ_n`.
    pub s_hat: Vec<f64>,
    /// Real-system cost with the augmented importance correction.
    pub real: Vec<f64>,
    /// Mixed cost plus the nominal importance correction.
    pub nominal: Vec<f64>,
    pub crashed: Vec<bool>,
}

impl AugmentedRollout {
    pub fn all_crashed(&self) -> bool {
        !self.crashed.is_empty() && self.crashed.iter().all(|c| *c)
    }
}

struct Sample {
    nominal_state: f64,
    s_hat: f64,
    real: f64,
    nominal: f64,
    crashed: bool,
}

/// Co-propagates the real system (with feedback toward the nominal) and the
/// nominal system under shared noise, without state disturbances. Running
/// costs are charged on `x_0 .. x_{T-1}` and the terminal cost on `x_T`.
#[allow(clippy::too_many_arguments)]
pub fn augmented_is(
    model: &SystemModel,
    cost: &CostFunction,
    x0: &State,
    x0_star: &State,
    u: &ControlSequence,
    policy: &FeedbackPolicy,
    plan: &NoisePlan,
    alpha: f64,
    crash_cost: f64,
) -> Result<AugmentedRollout> {
    check_dim("augmented real state", model.n_x(), x0.len())?;
    check_dim("augmented nominal state", model.n_x(), x0_star.len())?;
    check_dim("augmented horizon", u.horizon(), plan.horizon())?;
    check_dim("augmented control dim", model.n_u(), u.n_u())?;
    let gains = policy.gains().len();
    if gains != 1 && gains < u.horizon() {
        return Err(Error::Dimension {
            context: "feedback gains vs horizon",
            expected: u.horizon(),
            got: gains,
        });
    }
    let samples = map_samples(plan.samples(), |n| {
        augmented_one(model, cost, x0.as_slice(), x0_star.as_slice(), u, policy, plan, n, alpha, crash_cost)
    });
    let mut out = AugmentedRollout {
        nominal_state: Vec::with_capacity(samples.len()),
        s_hat: Vec::with_capacity(samples.len()),
        real: Vec::with_capacity(samples.len()),
        nominal: Vec::with_capacity(samples.len()),
        crashed: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        out.nominal_state.push(s.nominal_state);
        out.s_hat.push(s.s_hat);
        out.real.push(s.real);
        out.nominal.push(s.nominal);
        out.crashed.push(s.crashed);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn augmented_one(
    model: &SystemModel,
    cost: &CostFunction,
    x0: &[f64],
    x0_star: &[f64],
    u: &ControlSequence,
    policy: &FeedbackPolicy,
    plan: &NoisePlan,
    n: usize,
    alpha: f64,
    crash_cost: f64,
) -> Sample {
    let n_u = model.n_u();
    let sigma = &cost.sigma;
    let smoothed = cost.coefficient(ControlCostScale::Smoothed);
    let (mut x, mut xs) = (x0.to_vec(), x0_star.to_vec());
    let (mut nx, mut nxs) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let mut k = vec![0.0; n_u];
    let mut m = vec![0.0; n_u];
    let mut m2e = vec![0.0; n_u];
    let (mut s, mut sh, mut sr, mut control) = (0.0, 0.0, 0.0, 0.0);
    let crash = || Sample {
        nominal_state: crash_cost,
        s_hat: crash_cost,
        real: crash_cost,
        nominal: crash_cost,
        crashed: true,
    };
    for t in 0..u.horizon() {
        let ut = u.at(t);
        let eps = plan.eps(n, t);
        policy.apply_into(&x, &xs, t, &mut k);
        let qx = cost.running_cost(&x);
        sh += qx + smoothed * sigma.inner(&k, &k);
        s += cost.running_cost(&xs);
        for i in 0..n_u {
            m[i] = ut[i] + k[i];
            m2e[i] = ut[i] + 2.0 * eps[i] + k[i];
        }
        sr += qx + smoothed * sigma.inner(&m, &m2e);
        model.step_sum_into(&x, &[ut, eps, &k], &mut nx);
        model.step_sum_into(&xs, &[ut, eps], &mut nxs);
        std::mem::swap(&mut x, &mut nx);
        std::mem::swap(&mut xs, &mut nxs);
        if x.iter().chain(xs.iter()).any(|v| !v.is_finite()) {
            return crash();
        }
        control += control_cost_term(cost, ut, eps, ControlCostScale::Full);
    }
    let phi = cost.terminal_cost(&x);
    sh += phi;
    s += cost.terminal_cost(&xs);
    sr += phi;
    let nominal = mixed_cost(s, sh, alpha) + control;
    if [s, sh, sr, nominal].iter().any(|v| !v.is_finite()) {
        return crash();
    }
    Sample {
        nominal_state: s,
        s_hat: sh,
        real: sr,
        nominal,
        crashed: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{ControlCovariance, FnCost, QuadraticWallCost};
    use crate::dynamics::{double_integrator, Control};
    use crate::rng::stream;
    use crate::sampling::rollout_batch;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn cost(lambda: f64, beta: f64) -> CostFunction {
        CostFunction::new(
            Arc::new(QuadraticWallCost::quadratic(vec![1.0, 0.0], vec![2.0, 0.5]).unwrap()),
            Arc::new(QuadraticWallCost::quadratic(vec![1.0, 0.0], vec![10.0, 1.0]).unwrap()),
            ControlCovariance::diagonal(&[0.5]).unwrap(),
            lambda,
            beta,
        )
        .unwrap()
    }

    #[test]
    fn coincident_systems_share_state_cost() {
        let m = double_integrator();
        let c = cost(1.0, 0.5);
        let plan = NoisePlan::generate(3, stream::CONTROLLER, 0, 32, 15, &c.sigma);
        let x = State::from_vec(vec![-0.5, 0.2]);
        let u = ControlSequence::constant(15, &[0.4]);
        let zero = FeedbackPolicy::zero(1, 2);
        let aug = augmented_is(&m, &c, &x, &x, &u, &zero, &plan, f64::INFINITY, 1e6).unwrap();
        let plain = rollout_batch(&m, &c, &x, &u, &plan, 1e6).unwrap();
        for n in 0..32 {
            assert_eq!(aug.nominal_state[n], aug.s_hat[n]);
            // α = ∞ collapses the mixed cost to the plain nominal cost.
            assert_eq!(aug.nominal[n].to_bits(), plain.costs[n].to_bits());
        }
    }

    /// Two Euler steps by hand, with feedback gain [-1, -2], λ = 2, β = 0.5,
    /// Σ = 1, α = 100, running q(x) = p² + v², terminal φ(x) = 10 p².
    #[test]
    fn two_step_hand_trace() {
        let m = double_integrator();
        let c = CostFunction::new(
            Arc::new(FnCost::new(|x: &[f64]| x[0] * x[0] + x[1] * x[1])),
            Arc::new(FnCost::new(|x: &[f64]| 10.0 * x[0] * x[0])),
            ControlCovariance::diagonal(&[1.0]).unwrap(),
            2.0,
            0.5,
        )
        .unwrap();
        let gain = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        let policy =
            FeedbackPolicy::from_gains(crate::feedback::FeedbackKind::IlqgGains, vec![gain], &m).unwrap();
        let x0 = State::from_vec(vec![1.0, 0.0]);
        let xs0 = State::from_vec(vec![0.0, 0.0]);
        let u = ControlSequence::from_flat(1, vec![1.0, -1.0]).unwrap();
        let plan = NoisePlan::zeros(1, 2, 1);
        let aug = augmented_is(&m, &c, &x0, &xs0, &u, &policy, &plan, 100.0, 1e6).unwrap();

        // t=0: k = -1. real v' = 0 + 0.02*(1 - 1) = 0, p' = 1. nominal v' = 0.02, p' = 0.
        // t=1: real e = (1, 0) - (0, 0.02) = (1, -0.02): k = -1 + 0.04 = -0.96.
        //      real p'' = 1, v'' = 0.02*(-1 - 0.96) = -0.0392.
        //      nominal p'' = 0.0004, v'' = 0.
        let k0: f64 = -1.0;
        let k1: f64 = -0.96;
        let c_s = 2.0 * 0.5 / 2.0;
        let s_nom_state = 0.0 + (0.0 + 0.02f64 * 0.02) + 10.0 * 0.0004f64 * 0.0004;
        let phi_real = 10.0;
        let s_hat = 1.0 + c_s * k0 * k0 + 1.0 + c_s * k1 * k1 + phi_real;
        let s_real = 1.0 + c_s * (1.0 + k0) * (1.0 + k0) + 1.0 + c_s * (-1.0 + k1) * (-1.0 + k1) + phi_real;
        let control = 1.0 * (1.0 + 1.0);
        let nominal = 0.5 * s_nom_state + 0.5 * s_hat.min(100.0).max(s_nom_state) + control;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(aug.nominal_state[0], s_nom_state), "{}", aug.nominal_state[0]);
        assert!(close(aug.s_hat[0], s_hat), "{} vs {s_hat}", aug.s_hat[0]);
        assert!(close(aug.real[0], s_real), "{} vs {s_real}", aug.real[0]);
        assert!(close(aug.nominal[0], nominal));
        let _ = Control::zeros(1);
    }

    #[test]
    fn real_cost_matches_augmented_weight_without_smoothing() {
        let m = double_integrator();
        let c = cost(1.7, 0.0);
        let plan = NoisePlan::generate(5, stream::CONTROLLER, 1, 4, 8, &c.sigma);
        let x = State::from_vec(vec![0.3, -0.1]);
        let xs = State::from_vec(vec![0.0, 0.1]);
        let u = ControlSequence::constant(8, &[0.2]);
        let gain = DMatrix::from_row_slice(1, 2, &[-3.0, -2.0]);
        let policy =
            FeedbackPolicy::from_gains(crate::feedback::FeedbackKind::IlqgGains, vec![gain], &m).unwrap();
        let aug = augmented_is(&m, &c, &x, &xs, &u, &policy, &plan, 1e9, 1e9).unwrap();
        for n in 0..4 {
            // Recover the feedback sequence by replaying the real system.
            let mut xr = x.clone();
            let mut xn = xs.clone();
            let mut ks = Vec::new();
            let mut state = 0.0;
            for t in 0..8 {
                let k = policy.apply(&xr, &xn, t);
                state += c.running_cost(xr.as_slice());
                ks.push(k[0]);
                let e = plan.eps(n, t)[0];
                xr = m.step(&xr, &Control::from_vec(vec![u.at(t)[0] + e + k[0]])).unwrap();
                xn = m.step(&xn, &Control::from_vec(vec![u.at(t)[0] + e])).unwrap();
            }
            state += c.terminal_cost(xr.as_slice());
            let k = ControlSequence::from_flat(1, ks).unwrap();
            let eps = ControlSequence::from_flat(1, plan.sample(n).to_vec()).unwrap();
            let w = super::super::augmented_is_weight(&u, &k, &eps, &c.sigma).unwrap();
            let implied = (-(aug.real[n] - state) / c.lambda).exp();
            assert!((implied - w).abs() <= 1e-9 * w, "{implied} vs {w}");
        }
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let m = double_integrator();
        let c = cost(1.0, 0.5);
        let policy = FeedbackPolicy::from_gains(
            crate::feedback::FeedbackKind::IlqgGains,
            vec![DMatrix::zeros(1, 2); 3],
            &m,
        )
        .unwrap();
        let u = ControlSequence::zeros(5, 1);
        let err = augmented_is(&m, &c, &State::zeros(2), &State::zeros(2), &u, &policy, &NoisePlan::zeros(2, 5, 1), 1.0, 1.0);
        assert!(err.is_err());
    }
}
