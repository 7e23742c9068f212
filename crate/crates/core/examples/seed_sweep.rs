//! Runs one config over several seeds and prints a line per run.
//!
//! `cargo run --release --example seed_sweep -- configs/double_integrator.toml 5 feedback=ilqg`

use std::path::Path;

use rmppi_core::config::ExperimentConfig;
use rmppi_core::harness::{run_closed_loop, verify_bound};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().ok_or("usage: seed_sweep <config> [seeds] [key=value ...]")?;
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let overrides: Vec<String> = args.collect();
    let base = ExperimentConfig::load(Path::new(&path), &overrides)?;
    for seed in 0..seeds {
        let log = run_closed_loop(&base.with_overrides(&[format!("seed={seed}")])?)?;
        let s = &log.summary;
        let bound = match verify_bound(&log) {
            Ok(r) => format!("violations {:.2}% gap {:.1}", r.violation_rate * 100.0, r.mean_gap),
            Err(_) => "no bound".into(),
        };
        println!(
            "seed {seed}: {} steps {} crash {:?} mean cost {:.3} max dF {:.2} {bound}",
            s.controller.name(),
            log.rows.len(),
            s.crash_step,
            s.mean_cost,
            s.max_dfe
        );
    }
    Ok(())
}
