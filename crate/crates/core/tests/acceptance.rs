//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion. Exits nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use rmppi_core::config::{ExperimentConfig, FeedbackSection};
use rmppi_core::costs::{ControlCovariance, CostFunction, QuadraticWallCost};
use rmppi_core::dynamics::{double_integrator, State};
use rmppi_core::feedback::{contraction_feedback, fit_gamma, ilqg_gains, tracking_residuals, TrackingWeights};
use rmppi_core::harness::{run_closed_loop, verify_bound, RunLog};
use rmppi_core::rmppi::{
    augmented_is_weight, mixed_cost, Controller, ControllerSettings, FeedbackSpec, MppiController,
    RmppiController,
};
use rmppi_core::sampling::{free_energy_mc, is_weights, ControlSequence};

type Outcome = Result<String, String>;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load::<&str>(&path, &[]).expect("config file")
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.3
}

fn gaussian(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> Vec<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    (chol * z).as_slice().to_vec()
}

/// `log N(v; m, Σ)` up to the shared normalizer, with an LU inverse.
fn log_density(v: &[f64], m: &[f64], inv: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(v.len(), v.iter().zip(m).map(|(a, b)| a - b));
    -0.5 * (d.transpose() * inv * &d)[(0, 0)]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let n = 100_000;
    let mut bad = 0;
    for i in 0..n {
        let alpha: f64 = rng.random_range(0.0..100.0);
        // A fifth of the cases sit exactly on the threshold.
        let s_star: f64 = if i % 5 == 0 { alpha } else { rng.random_range(0.0..100.0) };
        let s_hat: f64 = if i % 7 == 0 { alpha } else { rng.random_range(0.0..100.0) };
        if (mixed_cost(s_star, s_hat, alpha) <= alpha) != (s_star <= alpha) {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("{n} triples, {bad} mismatches, {secs:.2}s");
    if bad == 0 && secs < 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let n_u = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=10);
        let sigma_m = random_spd(&mut rng, n_u);
        let sigma = ControlCovariance::new(sigma_m.clone()).unwrap();
        let inv = sigma_m.clone().lu().try_inverse().unwrap();
        let chol = sigma_m.cholesky().unwrap().l();
        let mut u = Vec::new();
        let mut k = Vec::new();
        let mut e = Vec::new();
        for _ in 0..t_len * n_u {
            u.push(rng.random_range(-0.5..0.5));
            k.push(rng.random_range(-0.5..0.5));
        }
        for _ in 0..t_len {
            e.extend(gaussian(&mut rng, &chol));
        }
        let us = ControlSequence::from_flat(n_u, u.clone()).unwrap();
        let ks = ControlSequence::from_flat(n_u, k.clone()).unwrap();
        let es = ControlSequence::from_flat(n_u, e.clone()).unwrap();
        let w = augmented_is_weight(&us, &ks, &es, &sigma).unwrap();
        // p(V) / q_A(V) with V = U + K + E, p = N(0, Σ), q_A = N(U + K, Σ).
        let mut log_ratio = 0.0;
        for t in 0..t_len {
            let r = t * n_u..(t + 1) * n_u;
            let mean: Vec<f64> = u[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a + b).collect();
            let v: Vec<f64> = mean.iter().zip(&e[r.clone()]).map(|(a, b)| a + b).collect();
            log_ratio += log_density(&v, &vec![0.0; n_u], &inv) - log_density(&v, &mean, &inv);
        }
        worst = worst.max(rel_err(w, log_ratio.exp()));
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("{n} tuples, max rel. error {worst:.2e}, {secs:.2}s");
    if worst <= 1e-8 && secs < 30.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mut bad = 0;
    for _ in 0..n {
        let size = rng.random_range(1..=300);
        let lambda: f64 = 10f64.powf(rng.random_range(-2.0..2.0));
        let scale: f64 = 10f64.powf(rng.random_range(-1.0..4.0));
        let costs: Vec<f64> = (0..size).map(|_| rng.random_range(0.0..scale)).collect();
        let f = free_energy_mc(&costs, lambda).unwrap().value;
        let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = min + lambda * (size as f64).ln();
        let tol = 1e-9 * hi.abs().max(1.0);
        if !(f >= min - tol && f <= hi + tol) {
            bad += 1;
        }
    }
    let msg = format!("{n} batches, {bad} outside [min, min + λ log N]");
    if bad == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10_000;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let n_u = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=10);
        let batch = rng.random_range(2..=8);
        let lambda: f64 = rng.random_range(0.2..5.0);
        let sigma_m = random_spd(&mut rng, n_u);
        let sigma = ControlCovariance::new(sigma_m.clone()).unwrap();
        let inv = sigma_m.clone().lu().try_inverse().unwrap();
        let chol = sigma_m.cholesky().unwrap().l();
        let u: Vec<f64> = (0..t_len * n_u).map(|_| rng.random_range(-1.0..1.0)).collect();
        let us = ControlSequence::from_flat(n_u, u.clone()).unwrap();
        let mut vs = Vec::new();
        let mut costs = Vec::new();
        let mut oracle = Vec::new();
        for _ in 0..batch {
            let mut v = Vec::new();
            for t in 0..t_len {
                let eps = gaussian(&mut rng, &chol);
                v.extend(eps.iter().zip(&u[t * n_u..(t + 1) * n_u]).map(|(e, m)| e + m));
            }
            let s: f64 = rng.random_range(0.0..10.0);
            // exp(-S/λ) p(V) / q(V): base density N(0, Σ), sampling density N(U, Σ).
            let mut log = -s / lambda;
            for t in 0..t_len {
                let r = t * n_u..(t + 1) * n_u;
                log += log_density(&v[r.clone()], &vec![0.0; n_u], &inv) - log_density(&v[r.clone()], &u[r], &inv);
            }
            oracle.push(log);
            costs.push(s);
            vs.push(ControlSequence::from_flat(n_u, v).unwrap());
        }
        let max = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = oracle.iter().map(|l| (l - max).exp()).sum();
        let w = is_weights(&vs, &us, &sigma, lambda, &costs).unwrap();
        for (wi, l) in w.iter().zip(&oracle) {
            worst = worst.max(rel_err(*wi, (l - max).exp() / total));
        }
    }
    let msg = format!("{n} tuples, max rel. error {worst:.2e}");
    if worst <= 1e-8 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_5() -> Outcome {
    let cfg = config("double_integrator.toml");
    let model = double_integrator();
    let f = &cfg.feedback;
    let metric = DMatrix::from_row_slice(2, 2, &f.metric.concat());
    let r = DMatrix::from_element(1, 1, f.r_track[0]);
    let checks = vec![State::zeros(2)];
    let policy = contraction_feedback(&metric, f.contraction_rate, &r, &model, &checks).map_err(|e| e.to_string())?;
    let horizon = 200;
    let u = ControlSequence::from_flat(1, (0..horizon).map(|t| (t as f64 * 0.05).sin()).collect()).unwrap();
    let nominal = model.rollout(&State::zeros(2), &u);
    // Unit offset along the slow closed-loop mode.
    let e0 = State::from_vec(vec![1.0, -4.0]) / 17f64.sqrt();
    let residuals = tracking_residuals(&model, &policy, &e0, &nominal, &u);
    let report = fit_gamma(&residuals).map_err(|e| e.to_string())?;

    let defaults = FeedbackSection::default();
    let weights = TrackingWeights {
        q: DMatrix::from_diagonal(&DVector::from_column_slice(&defaults.q_track)),
        r: DMatrix::from_diagonal(&DVector::from_column_slice(&defaults.r_track)),
    };
    let gains = ilqg_gains(&model, &weights, &nominal, &u).map_err(|e| e.to_string())?;
    let mut failing = 0;
    for i in 0..64 {
        let a = i as f64 * std::f64::consts::PI / 32.0;
        let res = tracking_residuals(&model, &gains, &State::from_vec(vec![a.cos(), a.sin()]), &nominal, &u);
        if res[10..].windows(2).any(|w| w[1] > w[0]) {
            failing += 1;
        }
    }
    let ilqg_ok = failing == 0;
    let msg = format!(
        "contraction γ_hat = {:.4}, satisfied = {}; iLQG error norm increases after step 10 for {failing}/64 offset directions",
        report.gamma_hat, report.satisfied
    );
    if report.gamma_hat <= 0.99 && report.satisfied && ilqg_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bound_runs(cfg: &ExperimentConfig, feedback: &str, seeds: u64) -> Result<Vec<RunLog>, String> {
    (0..seeds)
        .map(|seed| {
            let c = cfg
                .with_overrides(&[format!("feedback={feedback}"), format!("seed={seed}")])
                .map_err(|e| e.to_string())?;
            run_closed_loop(&c).map_err(|e| e.to_string())
        })
        .collect()
}

/// Per-seed `(within-bound fraction, mean gap, steps, crashed)`.
fn bound_stats(logs: &[RunLog]) -> Result<Vec<(f64, f64, usize, bool)>, String> {
    logs.iter()
        .map(|l| {
            let r = verify_bound(l).map_err(|e| e.to_string())?;
            Ok((1.0 - r.violation_rate, r.mean_gap, l.rows.len(), !l.summary.completed))
        })
        .collect()
}

fn fmt_stats(stats: &[(f64, f64, usize, bool)]) -> String {
    stats
        .iter()
        .map(|(w, g, n, c)| format!("{:.1}%/{g:.1}/{n}{}", w * 100.0, if *c { "!" } else { "" }))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = config("double_integrator.toml");
    let ccm = bound_stats(&bound_runs(&cfg, "contraction", 5)?)?;
    let ilqg = bound_stats(&bound_runs(&cfg, "ilqg", 5)?)?;
    let ok_rate = |s: &[(f64, f64, usize, bool)]| s.iter().all(|(w, _, n, _)| *w >= 0.99 && *n == cfg.harness.steps);
    let mean_gap = |s: &[(f64, f64, usize, bool)]| s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
    let (g_ccm, g_ilqg) = (mean_gap(&ccm), mean_gap(&ilqg));
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "within/gap/steps per seed: contraction [{}], iLQG [{}]; mean gap {g_ccm:.1} vs {g_ilqg:.1}; {secs:.0}s",
        fmt_stats(&ccm),
        fmt_stats(&ilqg)
    );
    if ok_rate(&ccm) && ok_rate(&ilqg) && g_ccm < g_ilqg && secs < 600.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7() -> Outcome {
    let cfg = config("nonlinear_benchmark.toml");
    let ccm = bound_stats(&bound_runs(&cfg, "contraction", 5)?)?;
    let ilqg = bound_stats(&bound_runs(&cfg, "ilqg", 5)?)?;
    let ok = |s: &[(f64, f64, usize, bool)]| s.iter().all(|(w, _, _, _)| *w >= 0.99);
    let msg = format!(
        "multiplier {}: contraction [{}], iLQG [{}]",
        cfg.harness.noise_multiplier,
        fmt_stats(&ccm),
        fmt_stats(&ilqg)
    );
    if ok(&ccm) && ok(&ilqg) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_8() -> Outcome {
    let cfg = config("double_integrator.toml");
    let seeds = 10;
    let mut crashes = [0usize; 3];
    for (i, c) in ["mppi", "tube", "rmppi"].iter().enumerate() {
        for seed in 0..seeds {
            let run = cfg
                .with_overrides(&[format!("controller={c}"), format!("seed={seed}")])
                .map_err(|e| e.to_string())?;
            let log = run_closed_loop(&run).map_err(|e| e.to_string())?;
            crashes[i] += log.summary.crashes;
        }
    }
    let [mppi, tube, rmppi] = crashes;
    let msg = format!("crashes over {seeds} seeds: MPPI {mppi}, Tube-MPPI {tube}, RMPPI {rmppi}");
    if rmppi <= tube && (seeds as usize - rmppi) * 10 >= 9 * seeds as usize {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_9() -> Outcome {
    let model = double_integrator();
    let cost = CostFunction::new(
        std::sync::Arc::new(
            QuadraticWallCost::new(vec![0.0, 0.0], vec![2.0, 0.1], vec![-1.5, f64::NEG_INFINITY], vec![1.5, f64::INFINITY], 20.0, 40.0)
                .unwrap(),
        ),
        std::sync::Arc::new(QuadraticWallCost::quadratic(vec![0.0, 0.0], vec![10.0, 0.5]).unwrap()),
        ControlCovariance::diagonal(&[1.0]).unwrap(),
        1.0,
        0.5,
    )
    .unwrap();
    let settings = ControllerSettings {
        alpha: f64::INFINITY,
        seed: 9,
        ..Default::default()
    };
    let mut mppi = MppiController::new(model.clone(), cost.clone(), settings.clone()).map_err(|e| e.to_string())?;
    let mut rmppi =
        RmppiController::new(model.clone(), cost, settings, FeedbackSpec::None).map_err(|e| e.to_string())?;
    let mut x = State::from_vec(vec![-1.0, 0.5]);
    let mut worst: f64 = 0.0;
    let mut nominal_ok = true;
    for k in 0..100 {
        let a = mppi.step(&x, k).map_err(|e| e.to_string())?;
        let r = rmppi.step(&x, k).map_err(|e| e.to_string())?;
        worst = worst.max(mppi.last_update().unwrap().max_abs_diff(rmppi.last_update().unwrap()));
        nominal_ok &= r.diagnostics.nominal.as_ref() == Some(&x);
        x = model.step(&x, &a.action).map_err(|e| e.to_string())?;
    }
    let msg = format!("100 steps, max |ΔU| = {worst:.2e}, x* = x every step: {nominal_ok}");
    if worst <= 1e-12 && nominal_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_10() -> Outcome {
    let cfg = config("double_integrator.toml")
        .with_overrides(&["noise_multiplier=0", "disturbance_bound=0", "steps=500"])
        .map_err(|e| e.to_string())?;
    let r = cfg.rmppi.nsp_candidates as i64;
    let quiet = run_closed_loop(&cfg).map_err(|e| e.to_string())?;
    let at_r = quiet.rows.iter().filter(|row| row.cand_idx == r).count() as f64 / quiet.rows.len() as f64;
    let kick_step = 300;
    let kicked = run_closed_loop(
        &cfg.with_overrides(&[format!("kick_step={kick_step}"), "kick=[1.0, 3.0]".to_string()])
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let observed = kick_step + 1;
    let idx = kicked.rows.get(observed).map_or(-1, |row| row.cand_idx);
    let msg = format!(
        "no disturbance: index R on {:.1}% of steps; after a one-shot kick the index is {idx} (R = {r})",
        at_r * 100.0
    );
    if at_r >= 0.95 && (0..r).contains(&idx) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_11() -> Outcome {
    let base = config("double_integrator.toml")
        .with_overrides(&["steps=300"])
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for c in ["mppi", "tube", "rmppi"] {
        let cfg = base.with_overrides(&[format!("controller={c}")]).map_err(|e| e.to_string())?;
        let run_in = |threads: usize| -> Result<String, String> {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| e.to_string())?;
            pool.install(|| run_closed_loop(&cfg))
                .and_then(|l| l.csv_string())
                .map_err(|e| e.to_string())
        };
        let a = run_in(1)?;
        let b = run_in(1)?;
        let c4 = run_in(4)?;
        lines.push((c, a == b, a == c4));
    }
    let ok = lines.iter().all(|(_, same, workers)| *same && *workers);
    let msg = lines
        .iter()
        .map(|(c, s, w)| format!("{c}: repeat {s}, 1 vs 4 workers {w}"))
        .collect::<Vec<_>>()
        .join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("mixed-cost threshold equivalence", criterion_1),
        ("augmented importance weight vs density ratio", criterion_2),
        ("free-energy sandwich", criterion_3),
        ("MPPI importance weight vs density ratio", criterion_4),
        ("exponential tracking", criterion_5),
        ("growth bound, double integrator x100", criterion_6),
        ("growth bound, nonlinear benchmark x150", criterion_7),
        ("controller comparison x100", criterion_8),
        ("seed-matched reduction to MPPI", criterion_9),
        ("nominal state selection", criterion_10),
        ("determinism", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        match f() {
            Ok(msg) => println!("criterion {id:>2} PASS  {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
