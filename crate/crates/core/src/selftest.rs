//! Randomized property checks of the core identities, runnable from a
//! release binary.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::costs::{ControlCovariance, CostFunction, QuadraticWallCost};
use crate::dynamics::{double_integrator, State};
use crate::rmppi::{
    augmented_is_weight, free_energy_growth_bound, mixed_cost, BoundParams, Controller, ControllerSettings,
    FeedbackSpec, MppiController, RmppiController,
};
use crate::sampling::{free_energy_mc, is_weights, ControlSequence};
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn random_covariance(rng: &mut ChaCha8Rng, n: usize) -> (ControlCovariance, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.3;
    let inv = m.clone().lu().try_inverse().expect("positive definite");
    let chol = m.clone().cholesky().expect("positive definite").l();
    (ControlCovariance::new(m).expect("positive definite"), inv, chol)
}

fn draw(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>, t_len: usize) -> Vec<f64> {
    let n = chol.nrows();
    let mut out = Vec::with_capacity(n * t_len);
    for _ in 0..t_len {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.extend((chol * z).iter());
    }
    out
}

/// `log N(v; 0, Σ) - log N(v; m, Σ)` summed over time.
fn log_ratio(v: &[f64], m: &[f64], inv: &DMatrix<f64>) -> f64 {
    let n = inv.nrows();
    v.chunks(n)
        .zip(m.chunks(n))
        .map(|(v, m)| {
            let v = DVector::from_column_slice(v);
            let d = &v - DVector::from_column_slice(m);
            -0.5 * (v.transpose() * inv * &v)[(0, 0)] + 0.5 * (d.transpose() * inv * &d)[(0, 0)]
        })
        .sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn mixed_cost_threshold(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..cases {
        let alpha: f64 = rng.random_range(0.0..100.0);
        let s_star = if i % 4 == 0 { alpha } else { rng.random_range(0.0..100.0) };
        let s_hat = rng.random_range(0.0..100.0);
        if (mixed_cost(s_star, s_hat, alpha) <= alpha) != (s_star <= alpha) {
            bad += 1;
        }
    }
    outcome("mixed cost threshold", bad == 0, format!("{bad}/{cases} mismatches"))
}

pub fn augmented_weight_density_ratio(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n_u = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=10);
        let (sigma, inv, chol) = random_covariance(&mut rng, n_u);
        let u: Vec<f64> = (0..n_u * t_len).map(|_| rng.random_range(-0.5..0.5)).collect();
        let k: Vec<f64> = (0..n_u * t_len).map(|_| rng.random_range(-0.5..0.5)).collect();
        let e = draw(&mut rng, &chol, t_len);
        let mean: Vec<f64> = u.iter().zip(&k).map(|(a, b)| a + b).collect();
        let v: Vec<f64> = mean.iter().zip(&e).map(|(a, b)| a + b).collect();
        let seq = |d: Vec<f64>| ControlSequence::from_flat(n_u, d).expect("whole steps");
        let w = augmented_is_weight(&seq(u), &seq(k), &seq(e), &sigma).expect("matching shapes");
        worst = worst.max(rel_err(w, log_ratio(&v, &mean, &inv).exp()));
    }
    outcome("augmented importance weight", worst <= 1e-8, format!("max rel. error {worst:.2e}"))
}

pub fn importance_weights_density_ratio(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n_u = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=8);
        let lambda = rng.random_range(0.2..5.0);
        let (sigma, inv, chol) = random_covariance(&mut rng, n_u);
        let u: Vec<f64> = (0..n_u * t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut seqs = Vec::new();
        let mut costs = Vec::new();
        let mut logs = Vec::new();
        for _ in 0..rng.random_range(2..=6) {
            let v: Vec<f64> = draw(&mut rng, &chol, t_len).iter().zip(&u).map(|(e, m)| e + m).collect();
            let s = rng.random_range(0.0..10.0);
            logs.push(-s / lambda + log_ratio(&v, &u, &inv));
            costs.push(s);
            seqs.push(ControlSequence::from_flat(n_u, v).expect("whole steps"));
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let u = ControlSequence::from_flat(n_u, u).expect("whole steps");
        let w = is_weights(&seqs, &u, &sigma, lambda, &costs).expect("valid batch");
        for (w, l) in w.iter().zip(&logs) {
            worst = worst.max(rel_err(*w, (l - max).exp() / total));
        }
    }
    outcome("importance weight", worst <= 1e-8, format!("max rel. error {worst:.2e}"))
}

pub fn free_energy_sandwich(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..=200);
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let costs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1000.0)).collect();
        let f = free_energy_mc(&costs, lambda).expect("valid batch").value;
        let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = min + lambda * (n as f64).ln();
        let tol = 1e-9 * hi.max(1.0);
        if f < min - tol || f > hi + tol {
            bad += 1;
        }
    }
    outcome("free-energy sandwich", bad == 0, format!("{bad}/{cases} outside"))
}

pub fn growth_bound_shape(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = double_integrator();
    let mut bad = 0;
    for _ in 0..cases {
        let p = BoundParams {
            alpha: rng.random_range(1.0..500.0),
            lambda: 1.0,
            beta: 0.5,
            gamma: rng.random_range(0.01..0.99),
            l_q: rng.random_range(0.0..10.0),
            l_phi: rng.random_range(0.0..10.0),
            emv: rng.random_range(0.0..5.0),
            d: rng.random_range(0.0..1.0),
            horizon: rng.random_range(1..50),
        };
        let x = State::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let x_star = State::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let u = DVector::from_vec(vec![rng.random_range(-1.0..1.0)]);
        let f_nom = rng.random_range(0.0..p.alpha);
        let b = free_energy_growth_bound(&p, &model, &x, &x_star, &u, f_nom).expect("valid parameters");
        let tighter = BoundParams { gamma: p.gamma * 0.5, ..p };
        let bt = free_energy_growth_bound(&tighter, &model, &x, &x_star, &u, f_nom).expect("valid parameters");
        let ceiling = p.l_phi + p.l_q / (1.0 - p.gamma);
        let ok = b.value >= b.value_without_d
            && b.value >= p.alpha - f_nom + 2.0 * p.emv
            && b.tracking_factor <= ceiling * (1.0 + 1e-12)
            && bt.tracking_factor <= b.tracking_factor * (1.0 + 1e-12);
        if !ok {
            bad += 1;
        }
    }
    outcome("growth bound shape", bad == 0, format!("{bad}/{cases} violations"))
}

pub fn reduction_to_mppi(steps: u64, seed: u64) -> CheckOutcome {
    let run = || -> Result<f64> {
        let model = double_integrator();
        let cost = CostFunction::new(
            Arc::new(QuadraticWallCost::quadratic(vec![0.0, 0.0], vec![2.0, 0.1])?),
            Arc::new(QuadraticWallCost::quadratic(vec![0.0, 0.0], vec![10.0, 0.5])?),
            ControlCovariance::diagonal(&[1.0])?,
            1.0,
            0.5,
        )?;
        let settings = ControllerSettings {
            alpha: f64::INFINITY,
            seed,
            samples: 128,
            ..Default::default()
        };
        let mut mppi = MppiController::new(model.clone(), cost.clone(), settings.clone())?;
        let mut rmppi = RmppiController::new(model.clone(), cost, settings, FeedbackSpec::None)?;
        let mut x = State::from_vec(vec![-1.0, 0.5]);
        let mut worst: f64 = 0.0;
        for k in 0..steps {
            let a = mppi.step(&x, k)?;
            rmppi.step(&x, k)?;
            if let (Some(m), Some(r)) = (mppi.last_update(), rmppi.last_update()) {
                worst = worst.max(m.max_abs_diff(r));
            }
            x = model.step(&x, &a.action)?;
        }
        Ok(worst)
    };
    match run() {
        Ok(worst) => outcome("reduction to MPPI", worst <= 1e-12, format!("max |ΔU| {worst:.2e}")),
        Err(e) => outcome("reduction to MPPI", false, e.to_string()),
    }
}

/// All checks at their default sizes.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        mixed_cost_threshold(100_000, seed),
        augmented_weight_density_ratio(2_000, seed.wrapping_add(1)),
        importance_weights_density_ratio(2_000, seed.wrapping_add(2)),
        free_energy_sandwich(2_000, seed.wrapping_add(3)),
        growth_bound_shape(2_000, seed.wrapping_add(4)),
        reduction_to_mppi(30, seed.wrapping_add(5)),
    ]
}
