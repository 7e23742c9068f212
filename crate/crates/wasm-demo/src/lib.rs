//! Browser bindings: a closed-loop simulation plus two curves of the
//! quantities behind the robustness guarantee.

use rmppi_core::config::ExperimentConfig;
use rmppi_core::harness::run_closed_loop;
use rmppi_core::rmppi::{mixed_cost, BoundParams};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DOUBLE_INTEGRATOR: &str = include_str!("../../../configs/double_integrator.toml");
const NONLINEAR_BENCHMARK: &str = include_str!("../../../configs/nonlinear_benchmark.toml");

#[derive(Debug, Serialize)]
pub struct Trace {
    pub system: String,
    pub controller: String,
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub nominal: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub fe_real: Vec<f64>,
    pub dfe: Vec<Option<f64>>,
    pub bound: Vec<Option<f64>>,
    pub cand_idx: Vec<i64>,
    /// Index of the real-state candidate.
    pub candidates: usize,
    pub crash_step: Option<usize>,
    pub wall: [f64; 2],
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Runs the stored experiment for `system` with the given controller.
pub fn simulate_trace(
    system: &str,
    controller: &str,
    steps: usize,
    seed: u64,
    noise_multiplier: f64,
) -> Result<Trace, String> {
    let text = match system {
        "double_integrator" => DOUBLE_INTEGRATOR,
        "nonlinear_benchmark" => NONLINEAR_BENCHMARK,
        other => return Err(format!("unknown system `{other}`")),
    };
    let overrides = [
        format!("controller=\"{controller}\""),
        format!("steps={steps}"),
        format!("seed={seed}"),
        format!("noise_multiplier={noise_multiplier:?}"),
    ];
    let cfg = ExperimentConfig::from_toml_with_overrides(text, &overrides).map_err(|e| e.to_string())?;
    let log = run_closed_loop(&cfg).map_err(|e| e.to_string())?;
    let rows = &log.rows;
    Ok(Trace {
        system: system.to_string(),
        controller: controller.to_string(),
        t: rows.iter().map(|r| r.t).collect(),
        x: rows.iter().map(|r| r.x.clone()).collect(),
        nominal: rows.iter().map(|r| r.nominal.clone()).collect(),
        u: rows.iter().map(|r| r.u[0]).collect(),
        fe_real: rows.iter().map(|r| r.fe_real).collect(),
        dfe: rows.iter().map(|r| finite(r.dfe)).collect(),
        bound: rows.iter().map(|r| finite(r.bound)).collect(),
        cand_idx: rows.iter().map(|r| r.cand_idx).collect(),
        candidates: cfg.rmppi.nsp_candidates,
        crash_step: log.summary.crash_step,
        wall: [cfg.cost.wall_lo[0], cfg.cost.wall_hi[0]],
    })
}

/// `mixed_cost(S*, Ŝ, α)` for `points` values of `Ŝ` spread over `[0, s_hat_max]`.
pub fn mixed_cost_values(s_star: f64, alpha: f64, s_hat_max: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n)
        .map(|i| mixed_cost(s_star, s_hat_max * i as f64 / (n - 1) as f64, alpha))
        .collect()
}

/// Tracking factor of the growth bound for `γ` spread over `(0, 1)`.
pub fn tracking_factor_values(l_q: f64, l_phi: f64, horizon: usize, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n)
        .map(|i| {
            let gamma = (i as f64 + 0.5) / n as f64;
            BoundParams {
                alpha: 1.0,
                lambda: 1.0,
                beta: 0.5,
                gamma,
                l_q,
                l_phi,
                emv: 0.0,
                d: 0.0,
                horizon,
            }
            .tracking_factor()
        })
        .collect()
}

#[wasm_bindgen]
pub fn simulate(
    system: &str,
    controller: &str,
    steps: u32,
    seed: u32,
    noise_multiplier: f64,
) -> Result<String, JsError> {
    let trace =
        simulate_trace(system, controller, steps as usize, seed as u64, noise_multiplier).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&trace).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn mixed_cost_curve(s_star: f64, alpha: f64, s_hat_max: f64, points: u32) -> Vec<f64> {
    mixed_cost_values(s_star, alpha, s_hat_max, points as usize)
}

#[wasm_bindgen]
pub fn tracking_factor_curve(l_q: f64, l_phi: f64, horizon: u32, points: u32) -> Vec<f64> {
    tracking_factor_values(l_q, l_phi, horizon as usize, points as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_simulation_has_one_entry_per_step() {
        let t = simulate_trace("double_integrator", "rmppi", 12, 3, 100.0).unwrap();
        assert_eq!(t.t.len(), 12);
        assert_eq!(t.x.len(), 12);
        assert!(t.bound[0].is_none());
        assert!(t.bound[1..].iter().all(|b| b.is_some()));
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.contains("\"controller\":\"rmppi\""));
    }

    #[test]
    fn mppi_trace_carries_no_bound() {
        let t = simulate_trace("nonlinear_benchmark", "mppi", 5, 0, 150.0).unwrap();
        assert!(t.bound.iter().all(Option::is_none));
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(simulate_trace("cartpole", "rmppi", 5, 0, 1.0).unwrap_err().contains("cartpole"));
        assert!(simulate_trace("double_integrator", "pid", 5, 0, 1.0).is_err());
    }

    #[test]
    fn mixed_cost_curve_saturates_at_alpha() {
        let c = mixed_cost_values(10.0, 50.0, 200.0, 201);
        assert_eq!(c[0], 10.0);
        assert_eq!(c[200], 30.0);
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn tracking_factor_grows_with_gamma() {
        let f = tracking_factor_values(2.0, 5.0, 30, 50);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
    }
}
