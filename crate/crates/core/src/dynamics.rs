//! Discrete-time system models.
//!
//! Every model is a continuous vector field `F(x, u)` integrated with one
//! explicit Euler step, `x' = x + F(x, u) dt`. Controls are saturated to the
//! model's limits before the vector field sees them.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, stream_rng};

pub type State = DVector<f64>;
pub type Control = DVector<f64>;

/// Largest control dimension the allocation-free step path supports.
pub const MAX_CONTROL_DIM: usize = 8;

/// Continuous-time vector field of a controlled system.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    /// Writes `F(x, u)` into `out`.
    fn vector_field(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    /// Analytic `(dF/dx, dF/du)`. Models without one fall back to central
    /// differences.
    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        None
    }
}

/// `p' = v`, `v' = u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleIntegrator;

impl Dynamics for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn vector_field(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = u[0];
    }
    fn jacobians(&self, _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        ))
    }
}

/// Torque-driven damped pendulum, `θ' = ω`, `ω' = -a sin θ - b ω + u`.
///
/// Control-affine with constant input matrix. Its Jacobian depends on the
/// state only through `cos θ`, so a constant metric can be certified for all
/// states by checking the two extremes `cos θ = ±1`.
#[derive(Debug, Clone, Copy)]
pub struct DampedPendulum {
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for DampedPendulum {
    fn default() -> Self {
        Self {
            stiffness: 4.0,
            damping: 0.5,
        }
    }
}

impl Dynamics for DampedPendulum {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn vector_field(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -self.stiffness * x[0].sin() - self.damping * x[1] + u[0];
    }
    fn jacobians(&self, x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((
            DMatrix::from_row_slice(
                2,
                2,
                &[0.0, 1.0, -self.stiffness * x[0].cos(), -self.damping],
            ),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        ))
    }
}

/// A vector field paired with its discretization and control limits.
/// Immutable once built; cheap to clone and share across workers.
#[derive(Clone)]
pub struct SystemModel {
    pub name: String,
    dynamics: Arc<dyn Dynamics>,
    pub dt: f64,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Components that are angles; interpolation wraps them.
    pub angular: Vec<bool>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("n_x", &self.n_x())
            .field("n_u", &self.n_u())
            .field("dt", &self.dt)
            .field("u_min", &self.u_min)
            .field("u_max", &self.u_max)
            .finish()
    }
}

impl SystemModel {
    pub fn new(name: impl Into<String>, dynamics: Arc<dyn Dynamics>, dt: f64) -> Result<Self> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be finite and nonnegative, got {dt}"),
            });
        }
        let n_u = dynamics.control_dim();
        if n_u == 0 || n_u > MAX_CONTROL_DIM {
            return Err(Error::InvalidParameter {
                name: "control_dim",
                reason: format!("must be in 1..={MAX_CONTROL_DIM}, got {n_u}"),
            });
        }
        let n_x = dynamics.state_dim();
        Ok(Self {
            name: name.into(),
            dynamics,
            dt,
            u_min: vec![f64::NEG_INFINITY; n_u],
            u_max: vec![f64::INFINITY; n_u],
            angular: vec![false; n_x],
        })
    }

    pub fn with_control_limits(mut self, u_min: Vec<f64>, u_max: Vec<f64>) -> Result<Self> {
        check_dim("control limits", self.n_u(), u_min.len())?;
        check_dim("control limits", self.n_u(), u_max.len())?;
        if u_min.iter().zip(&u_max).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidParameter {
                name: "control limits",
                reason: "u_min must not exceed u_max".into(),
            });
        }
        self.u_min = u_min;
        self.u_max = u_max;
        Ok(self)
    }

    pub fn n_x(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn saturate(&self, u: &mut [f64]) {
        for ((ui, lo), hi) in u.iter_mut().zip(&self.u_min).zip(&self.u_max) {
            *ui = ui.clamp(*lo, *hi);
        }
    }

    /// Euler step into `out`. `u` is saturated internally.
    pub fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n_u = self.n_u();
        let mut uc = [0.0; MAX_CONTROL_DIM];
        uc[..n_u].copy_from_slice(&u[..n_u]);
        self.saturate(&mut uc[..n_u]);
        self.dynamics.vector_field(x, &uc[..n_u], out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + *o * self.dt;
        }
    }

    /// Euler step of `x` under the sum of control contributions `parts`,
    /// added left to right and then saturated. Writes into `out`.
    pub fn step_sum_into(&self, x: &[f64], parts: &[&[f64]], out: &mut [f64]) {
        let n_u = self.n_u();
        let mut u = [0.0; MAX_CONTROL_DIM];
        u[..n_u].copy_from_slice(&parts[0][..n_u]);
        for p in &parts[1..] {
            for (ui, pi) in u[..n_u].iter_mut().zip(p.iter()) {
                *ui += pi;
            }
        }
        self.step_into(x, &u[..n_u], out);
    }

    pub fn step(&self, x: &State, u: &Control) -> Result<State> {
        check_dim("step state", self.n_x(), x.len())?;
        check_dim("step control", self.n_u(), u.len())?;
        let mut out = State::zeros(self.n_x());
        self.step_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// `(dF/dx, dF/du)` of the continuous vector field, unsaturated.
    pub fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        self.dynamics
            .jacobians(x.as_slice(), u.as_slice())
            .unwrap_or_else(|| finite_difference_jacobians(self.dynamics(), x, u))
    }

    /// Jacobians of the one-step map: `(I + A dt, B dt)`.
    pub fn discrete_jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = self.jacobians(x, u);
        let n = self.n_x();
        (DMatrix::identity(n, n) + a * self.dt, b * self.dt)
    }

    /// Deterministic rollout of `x0` under a control sequence.
    pub fn rollout(&self, x0: &State, controls: &crate::sampling::ControlSequence) -> Vec<State> {
        let mut traj = Vec::with_capacity(controls.horizon() + 1);
        traj.push(x0.clone());
        for t in 0..controls.horizon() {
            let mut next = State::zeros(self.n_x());
            self.step_into(traj[t].as_slice(), controls.at(t), next.as_mut_slice());
            traj.push(next);
        }
        traj
    }
}

/// Central-difference Jacobians of a vector field.
pub fn finite_difference_jacobians(
    dynamics: &dyn Dynamics,
    x: &State,
    u: &Control,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_x = dynamics.state_dim();
    let n_u = dynamics.control_dim();
    let mut fp = vec![0.0; n_x];
    let mut fm = vec![0.0; n_x];
    let mut a = DMatrix::zeros(n_x, n_x);
    let mut b = DMatrix::zeros(n_x, n_u);
    let mut xp = x.clone();
    for j in 0..n_x {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        dynamics.vector_field(xp.as_slice(), u.as_slice(), &mut fp);
        xp[j] = x[j] - h;
        dynamics.vector_field(xp.as_slice(), u.as_slice(), &mut fm);
        xp[j] = x[j];
        for i in 0..n_x {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut up = u.clone();
    for j in 0..n_u {
        let h = 1e-6 * u[j].abs().max(1.0);
        up[j] = u[j] + h;
        dynamics.vector_field(x.as_slice(), up.as_slice(), &mut fp);
        up[j] = u[j] - h;
        dynamics.vector_field(x.as_slice(), up.as_slice(), &mut fm);
        up[j] = u[j];
        for i in 0..n_x {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (a, b)
}

pub const DEFAULT_DT: f64 = 0.02;

pub fn double_integrator() -> SystemModel {
    SystemModel::new("double_integrator", Arc::new(DoubleIntegrator), DEFAULT_DT)
        .expect("valid built-in model")
}

/// Damped pendulum, see [`DampedPendulum`].
pub fn nonlinear_benchmark() -> SystemModel {
    SystemModel::new(
        "nonlinear_benchmark",
        Arc::new(DampedPendulum::default()),
        DEFAULT_DT,
    )
    .expect("valid built-in model")
}

pub fn system_by_name(name: &str) -> Result<SystemModel> {
    match name {
        "double_integrator" => Ok(double_integrator()),
        "nonlinear_benchmark" => Ok(nonlinear_benchmark()),
        _ => Err(Error::Unknown {
            kind: "system",
            name: name.to_string(),
        }),
    }
}

/// Disturbances acting on the true plant only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceModel {
    /// Multiplier on the control-noise covariance the controller assumes.
    pub noise_scale: f64,
    /// Norm bound `D` on the additive state disturbance.
    pub bound: f64,
}

impl DisturbanceModel {
    pub fn new(noise_scale: f64, bound: f64) -> Result<Self> {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "noise_scale",
                reason: format!("must be finite and nonnegative, got {noise_scale}"),
            });
        }
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "disturbance_bound",
                reason: format!("must be finite and nonnegative, got {bound}"),
            });
        }
        Ok(Self { noise_scale, bound })
    }

    pub fn none() -> Self {
        Self {
            noise_scale: 0.0,
            bound: 0.0,
        }
    }

    pub fn sampler(&self, seed: u64) -> DisturbanceSampler {
        DisturbanceSampler {
            model: *self,
            noise_rng: stream_rng(seed, stream::PLANT_NOISE, 0),
            w_rng: stream_rng(seed, stream::PLANT_DISTURBANCE, 0),
        }
    }
}

/// Seeded plant-side randomness. Control noise and state disturbance use
/// separate streams.
#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    pub model: DisturbanceModel,
    noise_rng: ChaCha8Rng,
    w_rng: ChaCha8Rng,
}

impl DisturbanceSampler {
    /// Uniform draw from the closed ball of radius `D` in `n_x` dimensions.
    pub fn sample_w(&mut self, n_x: usize) -> State {
        let d = self.model.bound;
        if d == 0.0 || n_x == 0 {
            return State::zeros(n_x);
        }
        let mut w = State::from_fn(n_x, |_, _| self.w_rng.sample::<f64, _>(StandardNormal));
        let norm = w.norm();
        if norm == 0.0 {
            return State::zeros(n_x);
        }
        let radius = d * self.w_rng.random::<f64>().powf(1.0 / n_x as f64);
        w *= radius / norm;
        let n = w.norm();
        if n > d {
            w *= d / n;
        }
        w
    }

    /// Control-channel noise with covariance `noise_scale * Σ`, given the
    /// lower Cholesky factor of `Σ`.
    pub fn sample_control_noise(&mut self, sigma_chol: &DMatrix<f64>) -> Control {
        let n_u = sigma_chol.nrows();
        let z = Control::from_fn(n_u, |_, _| self.noise_rng.sample::<f64, _>(StandardNormal));
        sigma_chol * z * self.model.noise_scale.sqrt()
    }
}

/// One step of the disturbed real system:
/// `x + F(x, sat(u + k_fb + eps)) dt + w`, with `w` drawn from `sampler`.
pub fn propagate_real(
    model: &SystemModel,
    sampler: &mut DisturbanceSampler,
    x: &State,
    u: &Control,
    eps: &Control,
    k_fb: &Control,
) -> Result<State> {
    check_dim("propagate_real state", model.n_x(), x.len())?;
    check_dim("propagate_real control", model.n_u(), u.len())?;
    check_dim("propagate_real noise", model.n_u(), eps.len())?;
    check_dim("propagate_real feedback", model.n_u(), k_fb.len())?;
    let w = sampler.sample_w(model.n_x());
    Ok(propagate_real_with(model, x, u, eps, k_fb, &w))
}

/// [`propagate_real`] with an explicit disturbance realization.
pub fn propagate_real_with(
    model: &SystemModel,
    x: &State,
    u: &Control,
    eps: &Control,
    k_fb: &Control,
    w: &State,
) -> State {
    let mut out = State::zeros(model.n_x());
    model.step_sum_into(
        x.as_slice(),
        &[u.as_slice(), k_fb.as_slice(), eps.as_slice()],
        out.as_mut_slice(),
    );
    out + w
}
