//! Closed-loop simulation against a disturbed plant, run logs, bound
//! verification and controller comparison.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FeedbackChoice};
use crate::costs::{lipschitz_estimate, BoxDomain, ControlCovariance, CostFunction, QuadraticWallCost};
use crate::dynamics::{propagate_real_with, system_by_name, Control, DisturbanceModel, DisturbanceSampler, State, SystemModel};
use crate::error::{Error, Result};
use crate::feedback::{contraction_feedback, TrackingWeights};
use crate::rmppi::{
    Controller, ControllerKind, ControllerSettings, FeedbackSpec, MppiController, RmppiController, StepStatus,
    TubeController,
};

/// Everything a run needs, resolved from an [`ExperimentConfig`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: SystemModel,
    pub cost: CostFunction,
    pub admissible: BoxDomain,
    pub disturbance: DisturbanceModel,
    pub settings: ControllerSettings,
    pub feedback: FeedbackSpec,
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values))
}

impl Experiment {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let sys = &config.system;
        let mut model = system_by_name(&sys.model)?.with_control_limits(sys.u_min.clone(), sys.u_max.clone())?;
        model.dt = sys.dt;
        let n_x = model.n_x();
        crate::error::check_dim("system.x0", n_x, sys.x0.len())?;

        let c = &config.cost;
        let running = QuadraticWallCost::new(
            c.target.clone(),
            c.weights.clone(),
            c.wall_lo.clone(),
            c.wall_hi.clone(),
            c.wall_slope,
            c.clip,
        )?;
        let terminal = QuadraticWallCost::new(
            c.target.clone(),
            c.terminal_weights.clone(),
            c.wall_lo.clone(),
            c.wall_hi.clone(),
            c.wall_slope,
            c.terminal_clip,
        )?;
        crate::error::check_dim("cost.target", n_x, c.target.len())?;
        let cost = CostFunction::new(
            Arc::new(running),
            Arc::new(terminal),
            ControlCovariance::diagonal(&c.sigma)?,
            c.lambda,
            c.beta,
        )?;
        crate::error::check_dim("cost.sigma", model.n_u(), cost.n_u())?;
        let admissible = BoxDomain::new(sys.box_lo.clone(), sys.box_hi.clone())?;

        let h = &config.harness;
        let disturbance = DisturbanceModel::new(h.noise_multiplier, h.disturbance_bound)?;

        let (l_q, l_phi) = match cost.lipschitz_constants() {
            Some(l) => l,
            None => {
                let est = lipschitz_estimate(&cost, &admissible, config.rmppi.lipschitz_pairs, h.seed)?;
                (est.running, est.terminal)
            }
        };
        let r = &config.rmppi;
        let settings = ControllerSettings {
            samples: config.sampler.samples,
            horizon: config.sampler.horizon,
            seed: h.seed,
            alpha: config.alpha(),
            crash_cost: config.sampler.crash_cost,
            nsp_candidates: r.nsp_candidates,
            nsp_samples: config.nsp_samples(),
            emv_repeats: r.emv_repeats,
            emv_scale: r.emv_scale,
            gamma_window: r.gamma_window,
            gamma_eps: r.gamma_eps,
            smoothing: config.sampler.smoothing,
            disturbance_bound: h.disturbance_bound,
            l_q,
            l_phi,
        };
        settings.validate()?;

        let f = &config.feedback;
        let feedback = match f.feedback {
            FeedbackChoice::None => FeedbackSpec::None,
            FeedbackChoice::Ilqg => {
                crate::error::check_dim("feedback.q_track", n_x, f.q_track.len())?;
                crate::error::check_dim("feedback.r_track", model.n_u(), f.r_track.len())?;
                FeedbackSpec::Ilqg(TrackingWeights {
                    q: diag(&f.q_track),
                    r: diag(&f.r_track),
                })
            }
            FeedbackChoice::Contraction => {
                crate::error::check_dim("feedback.metric rows", n_x, f.metric.len())?;
                let mut flat = Vec::with_capacity(n_x * n_x);
                for row in &f.metric {
                    crate::error::check_dim("feedback.metric cols", n_x, row.len())?;
                    flat.extend_from_slice(row);
                }
                let metric = DMatrix::from_row_slice(n_x, n_x, &flat);
                let checks = contraction_check_states(&model, &admissible);
                let policy = contraction_feedback(&metric, f.contraction_rate, &diag(&f.r_track), &model, &checks)?;
                FeedbackSpec::Fixed(policy)
            }
        };
        Ok(Self {
            config: config.clone(),
            model,
            cost,
            admissible,
            disturbance,
            settings,
            feedback,
        })
    }

    pub fn build_controller(&self) -> Result<Box<dyn Controller>> {
        let (m, c, s) = (self.model.clone(), self.cost.clone(), self.settings.clone());
        Ok(match self.config.harness.controller {
            ControllerKind::Mppi => Box::new(MppiController::new(m, c, s)?),
            ControllerKind::Tube => Box::new(TubeController::new(m, c, s, self.feedback.clone())?),
            ControllerKind::Rmppi => Box::new(RmppiController::new(m, c, s, self.feedback.clone())?),
        })
    }

    pub fn live_plant(&self) -> LivePlant {
        LivePlant::new(self)
    }
}

/// States at which a constant metric is certified: the box corners and a
/// grid through it. For the pendulum the worst cases `cos θ = ±1` are added.
fn contraction_check_states(model: &SystemModel, domain: &BoxDomain) -> Vec<State> {
    let n = domain.lo.len();
    let mut out = Vec::new();
    let steps: usize = 9;
    let total = steps.pow(n as u32);
    for idx in 0..total {
        let mut rem = idx;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let j = rem % steps;
                rem /= steps;
                domain.lo[i] + (domain.hi[i] - domain.lo[i]) * j as f64 / (steps - 1) as f64
            })
            .collect();
        out.push(State::from_vec(x));
    }
    if model.name == "nonlinear_benchmark" {
        out.push(State::from_vec(vec![0.0, 0.0]));
        out.push(State::from_vec(vec![std::f64::consts::PI, 0.0]));
    }
    out
}

/// One plant realization: the control-noise draw and the state disturbance
/// applied at a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantEvent {
    pub eps: Vec<f64>,
    pub w: Vec<f64>,
}

/// The true system. Only the harness sees its randomness.
pub trait Plant {
    fn advance(&mut self, k: usize, x: &State, action: &Control) -> Result<State>;
}

/// Draws disturbances on the fly and records them.
pub struct LivePlant {
    model: SystemModel,
    sampler: DisturbanceSampler,
    chol: DMatrix<f64>,
    kick: Option<(usize, State)>,
    pub record: Vec<PlantEvent>,
}

impl LivePlant {
    pub fn new(exp: &Experiment) -> Self {
        let h = &exp.config.harness;
        Self {
            model: exp.model.clone(),
            sampler: exp.disturbance.sampler(h.seed),
            chol: exp.cost.sigma.cholesky().clone(),
            kick: h.kick_step.map(|k| (k, State::from_column_slice(&h.kick))),
            record: Vec::new(),
        }
    }
}

impl Plant for LivePlant {
    fn advance(&mut self, k: usize, x: &State, action: &Control) -> Result<State> {
        let eps = self.sampler.sample_control_noise(&self.chol);
        let mut w = self.sampler.sample_w(self.model.n_x());
        if let Some((step, kick)) = &self.kick {
            if *step == k {
                w += kick;
            }
        }
        self.record.push(PlantEvent {
            eps: eps.as_slice().to_vec(),
            w: w.as_slice().to_vec(),
        });
        let zero = Control::zeros(self.model.n_u());
        Ok(propagate_real_with(&self.model, x, action, &eps, &zero, &w))
    }
}

/// Replays recorded disturbances.
pub struct RecordedPlant {
    model: SystemModel,
    events: Vec<PlantEvent>,
}

impl RecordedPlant {
    pub fn new(model: SystemModel, events: Vec<PlantEvent>) -> Self {
        Self { model, events }
    }
}

impl Plant for RecordedPlant {
    fn advance(&mut self, k: usize, x: &State, action: &Control) -> Result<State> {
        let e = self.events.get(k).ok_or(Error::Empty("recorded plant events"))?;
        let zero = Control::zeros(self.model.n_u());
        Ok(propagate_real_with(
            &self.model,
            x,
            action,
            &Control::from_column_slice(&e.eps),
            &zero,
            &State::from_column_slice(&e.w),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub step: usize,
    pub t: f64,
    pub fe_real: f64,
    pub fe_nom: f64,
    /// Growth bound for the transition into this step.
    pub bound: f64,
    pub dfe: f64,
    /// `-1` when the controller has no candidate choice.
    pub cand_idx: i64,
    pub gamma_hat: f64,
    pub emv: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub nominal: Vec<f64>,
    /// The action taken at this step left the admissible box.
    pub crash: bool,
    pub bound_no_d: f64,
    pub degenerate: bool,
    pub reset: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub controller: ControllerKind,
    pub seed: u64,
    pub steps: usize,
    pub completed: bool,
    pub crashes: usize,
    pub crash_step: Option<usize>,
    pub mean_cost: f64,
    pub max_dfe: f64,
    pub degenerate_steps: usize,
    pub bound_violation_rate: Option<f64>,
    pub mean_bound_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub n_x: usize,
    pub n_u: usize,
    pub rows: Vec<RunRow>,
    pub summary: RunSummary,
    pub config: ExperimentConfig,
}

pub fn run_closed_loop(config: &ExperimentConfig) -> Result<RunLog> {
    let exp = Experiment::from_config(config)?;
    let mut plant = exp.live_plant();
    run_with_plant(&exp, &mut plant)
}

pub fn run_with_plant(exp: &Experiment, plant: &mut dyn Plant) -> Result<RunLog> {
    let mut controller = exp.build_controller()?;
    let (n_x, n_u) = (exp.model.n_x(), exp.model.n_u());
    let cfg = &exp.config;
    let is_rmppi = cfg.harness.controller == ControllerKind::Rmppi;
    let mut x = State::from_column_slice(&cfg.system.x0);
    let mut rows = Vec::with_capacity(cfg.harness.steps);
    let mut prev_fe: Option<f64> = None;
    let mut prev_bound: Option<(f64, f64)> = None;
    let mut cost_sum = 0.0;
    for k in 0..cfg.harness.steps {
        let out = controller.step(&x, k as u64)?;
        let d = &out.diagnostics;
        let (bound, bound_no_d) = match prev_bound {
            Some(b) => b,
            None if is_rmppi => (f64::INFINITY, f64::INFINITY),
            None => (f64::NAN, f64::NAN),
        };
        let dfe = prev_fe.map_or(f64::NAN, |p| d.fe_real - p);
        cost_sum += exp.cost.running_cost(x.as_slice());
        let next = plant.advance(k, &x, &out.action)?;
        let crash = !next.iter().all(|v| v.is_finite()) || !exp.admissible.contains(next.as_slice());
        rows.push(RunRow {
            step: k,
            t: k as f64 * exp.model.dt,
            fe_real: d.fe_real,
            fe_nom: d.fe_nom,
            bound,
            dfe,
            cand_idx: d.cand_idx.map_or(-1, |i| i as i64),
            gamma_hat: d.gamma_hat.unwrap_or(f64::NAN),
            emv: d.emv.unwrap_or(f64::NAN),
            x: x.as_slice().to_vec(),
            u: out.action.as_slice().to_vec(),
            nominal: d
                .nominal
                .as_ref()
                .map_or_else(|| vec![f64::NAN; n_x], |s| s.as_slice().to_vec()),
            crash,
            bound_no_d,
            degenerate: out.status == StepStatus::Degenerate,
            reset: d.reset.map_or(-1, i64::from),
        });
        prev_fe = Some(d.fe_real);
        prev_bound = d.bound.map(|b| (b.value, b.value_without_d));
        x = next;
        if crash {
            break;
        }
    }
    let summary = summarize(cfg, &rows, cost_sum);
    Ok(RunLog {
        n_x,
        n_u,
        rows,
        summary,
        config: cfg.clone(),
    })
}

fn summarize(cfg: &ExperimentConfig, rows: &[RunRow], cost_sum: f64) -> RunSummary {
    let crash_step = rows.iter().find(|r| r.crash).map(|r| r.step);
    let max_dfe = rows
        .iter()
        .map(|r| r.dfe)
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let report = verify_rows(rows).ok();
    RunSummary {
        name: cfg.harness.name.clone(),
        controller: cfg.harness.controller,
        seed: cfg.harness.seed,
        steps: rows.len(),
        completed: crash_step.is_none(),
        crashes: usize::from(crash_step.is_some()),
        crash_step,
        mean_cost: if rows.is_empty() { 0.0 } else { cost_sum / rows.len() as f64 },
        max_dfe,
        degenerate_steps: rows.iter().filter(|r| r.degenerate).count(),
        bound_violation_rate: report.as_ref().map(|r| r.violation_rate),
        mean_bound_gap: report.as_ref().map(|r| r.mean_gap),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    /// Rows with a finite free-energy change.
    pub checked: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// Mean of `bound - dfe` over rows with a finite bound.
    pub mean_gap: f64,
    /// Same, using the distance term without `D`.
    pub mean_gap_no_d: f64,
    pub violations_no_d: usize,
    pub within: Vec<bool>,
}

/// Pairs of `(dfe, bound, bound_no_d)`, as read from a run log.
pub fn verify_bound_columns(cols: &[(f64, f64, f64)]) -> Result<BoundReport> {
    if !cols.is_empty() && cols.iter().all(|(_, b, _)| b.is_nan()) {
        return Err(Error::MissingColumn("bound (the log has no growth-bound diagnostics)".into()));
    }
    let mut within = Vec::new();
    let (mut violations, mut violations_no_d) = (0, 0);
    let (mut gap, mut gap_no_d, mut finite) = (0.0, 0.0, 0usize);
    for &(dfe, bound, bound_no_d) in cols {
        if !dfe.is_finite() || bound.is_nan() {
            continue;
        }
        let ok = dfe <= bound;
        within.push(ok);
        if !ok {
            violations += 1;
        }
        if !(dfe <= bound_no_d) {
            violations_no_d += 1;
        }
        if bound.is_finite() && bound_no_d.is_finite() {
            gap += bound - dfe;
            gap_no_d += bound_no_d - dfe;
            finite += 1;
        }
    }
    let checked = within.len();
    let mean = |s: f64| if finite == 0 { f64::NAN } else { s / finite as f64 };
    Ok(BoundReport {
        checked,
        violations,
        violation_rate: if checked == 0 { 0.0 } else { violations as f64 / checked as f64 },
        mean_gap: mean(gap),
        mean_gap_no_d: mean(gap_no_d),
        violations_no_d,
        within,
    })
}

pub fn verify_rows(rows: &[RunRow]) -> Result<BoundReport> {
    let cols: Vec<_> = rows.iter().map(|r| (r.dfe, r.bound, r.bound_no_d)).collect();
    verify_bound_columns(&cols)
}

pub fn verify_bound(log: &RunLog) -> Result<BoundReport> {
    verify_rows(&log.rows)
}

/// Reads a run-log CSV and checks its bound columns.
pub fn verify_bound_csv<R: Read>(reader: R) -> Result<BoundReport> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (i_dfe, i_bound) = (col("dfe")?, col("bound")?);
    let i_no_d = col("bound_no_d").ok();
    let mut cols = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("");
            parse_f64(s).ok_or_else(|| Error::Config(format!("bad number `{s}` in run log")))
        };
        let bound = num(i_bound)?;
        let no_d = match i_no_d {
            Some(i) => num(i)?,
            None => bound,
        };
        cols.push((num(i_dfe)?, bound, no_d));
    }
    verify_bound_columns(&cols)
}

fn parse_f64(s: &str) -> Option<f64> {
    match s.trim() {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "NaN" | "nan" | "" => Some(f64::NAN),
        t => t.parse().ok(),
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

impl RunLog {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "t", "fe_real", "fe_nom", "bound", "dfe", "cand_idx", "gamma_hat", "emv"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..self.n_x).map(|i| format!("x{i}")));
        h.extend((0..self.n_u).map(|i| format!("u{i}")));
        h.extend((0..self.n_x).map(|i| format!("xn{i}")));
        h.extend(["crash", "bound_no_d", "degenerate", "reset"].iter().map(|s| s.to_string()));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                fmt_f64(r.t),
                fmt_f64(r.fe_real),
                fmt_f64(r.fe_nom),
                fmt_f64(r.bound),
                fmt_f64(r.dfe),
                r.cand_idx.to_string(),
                fmt_f64(r.gamma_hat),
                fmt_f64(r.emv),
            ];
            rec.extend(r.x.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.u.iter().map(|v| fmt_f64(*v)));
            rec.extend(r.nominal.iter().map(|v| fmt_f64(*v)));
            rec.push(u8::from(r.crash).to_string());
            rec.push(fmt_f64(r.bound_no_d));
            rec.push(u8::from(r.degenerate).to_string());
            rec.push(r.reset.to_string());
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes `<out>/<name>/{runlog.csv, summary.json, config.toml}` and
    /// returns the run directory.
    pub fn write_outputs(&self, out: &Path) -> Result<PathBuf> {
        let dir = out.join(&self.summary.name);
        fs::create_dir_all(&dir)?;
        self.write_csv(fs::File::create(dir.join("runlog.csv"))?)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary)? + "\n")?;
        fs::write(dir.join("config.toml"), self.config.to_toml_string()?)?;
        Ok(dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    pub completed: bool,
    pub crashes: usize,
    pub mean_cost: f64,
    pub max_dfe: f64,
}

impl ComparisonRow {
    pub fn from_log(log: &RunLog) -> Self {
        let s = &log.summary;
        Self {
            controller: s.controller,
            completed: s.completed,
            crashes: s.crashes,
            mean_cost: s.mean_cost,
            max_dfe: s.max_dfe,
        }
    }
}

fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.harness.controller = ControllerKind::Rmppi;
    c.harness.name = String::new();
    c
}

/// Runs each config on the same plant realizations and tabulates the
/// outcome. The configs may differ only in controller and run name.
pub fn compare_controllers(configs: &[ExperimentConfig]) -> Result<Vec<ComparisonRow>> {
    check_comparable(configs)?;
    Ok(run_all(configs)?.iter().map(ComparisonRow::from_log).collect())
}

pub fn check_comparable(configs: &[ExperimentConfig]) -> Result<()> {
    if let Some(first) = configs.first() {
        let base = comparable(first);
        for c in &configs[1..] {
            if comparable(c) != base {
                return Err(Error::Config(
                    "compared configs must be identical apart from controller and name".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Runs independent configs, concurrently when the `parallel` feature is on.
pub fn run_all(configs: &[ExperimentConfig]) -> Result<Vec<RunLog>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        configs.par_iter().map(run_closed_loop).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        configs.iter().map(run_closed_loop).collect()
    }
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["controller", "completed", "crashes", "mean_cost", "max_dfe"])?;
    for r in rows {
        w.write_record([
            r.controller.name().to_string(),
            r.completed.to_string(),
            r.crashes.to_string(),
            fmt_f64(r.mean_cost),
            fmt_f64(r.max_dfe),
        ])?;
    }
    w.flush()?;
    Ok(())
}
