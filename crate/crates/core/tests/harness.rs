use std::path::PathBuf;

use rmppi_core::config::ExperimentConfig;
use rmppi_core::harness::{
    compare_controllers, run_closed_loop, run_with_plant, verify_bound_csv, Experiment, RecordedPlant,
};

fn short(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let cfg = ExperimentConfig::load(&path, &["steps=60"]).unwrap();
    cfg.with_overrides(overrides).unwrap()
}

#[test]
fn replaying_recorded_disturbances_reproduces_the_run() {
    let cfg = short("double_integrator.toml", &[]);
    let exp = Experiment::from_config(&cfg).unwrap();
    let mut live = exp.live_plant();
    let a = run_with_plant(&exp, &mut live).unwrap();
    let mut replay = RecordedPlant::new(exp.model.clone(), live.record.clone());
    let b = run_with_plant(&exp, &mut replay).unwrap();
    assert_eq!(a.csv_string().unwrap(), b.csv_string().unwrap());
}

#[test]
fn different_seeds_give_different_logs() {
    let a = run_closed_loop(&short("double_integrator.toml", &["seed=1"])).unwrap();
    let b = run_closed_loop(&short("double_integrator.toml", &["seed=2"])).unwrap();
    assert_ne!(a.csv_string().unwrap(), b.csv_string().unwrap());
}

#[test]
fn outputs_round_trip_through_disk() {
    let cfg = short("nonlinear_benchmark.toml", &["name=pend"]);
    let log = run_closed_loop(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run_dir = log.write_outputs(dir.path()).unwrap();
    assert_eq!(run_dir, dir.path().join("pend"));

    let csv = std::fs::File::open(run_dir.join("runlog.csv")).unwrap();
    let report = verify_bound_csv(csv).unwrap();
    assert_eq!(report.checked, log.rows.len() - 1);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 60);
    assert_eq!(summary["controller"], "rmppi");

    let text = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    let back = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn comparison_covers_each_controller() {
    let configs: Vec<_> = ["mppi", "tube", "rmppi"]
        .iter()
        .map(|c| short("double_integrator.toml", &[&format!("controller={c}"), &format!("name={c}")]))
        .collect();
    let rows = compare_controllers(&configs).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, c) in rows.iter().zip(["mppi", "tube", "rmppi"]) {
        assert_eq!(row.controller.name(), c);
        assert!(row.mean_cost.is_finite());
    }
}

#[test]
fn free_energy_is_finite_on_every_row() {
    for name in ["double_integrator.toml", "nonlinear_benchmark.toml"] {
        let log = run_closed_loop(&short(name, &[])).unwrap();
        assert!(log.summary.completed, "{name}");
        for row in &log.rows {
            assert!(row.fe_real.is_finite() && row.fe_nom.is_finite(), "{name} step {}", row.step);
            assert!(row.gamma_hat > 0.0 && row.gamma_hat < 1.0);
        }
    }
}
