//! Noise generation, batched rollouts, free-energy estimation and the
//! vanilla MPPI update.
//!
//! Reductions over samples always run in sample order so results do not
//! depend on the number of worker threads.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::costs::{control_cost_term, ControlCostScale, ControlCovariance, CostFunction};
use crate::dynamics::{State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;

/// Row-major `T x n_u` control trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    n_u: usize,
    data: Vec<f64>,
}

impl ControlSequence {
    pub fn zeros(horizon: usize, n_u: usize) -> Self {
        Self {
            n_u,
            data: vec![0.0; horizon * n_u],
        }
    }

    pub fn from_flat(n_u: usize, data: Vec<f64>) -> Result<Self> {
        if n_u == 0 || data.len() % n_u != 0 {
            return Err(Error::Dimension {
                context: "control sequence",
                expected: n_u,
                got: data.len(),
            });
        }
        Ok(Self { n_u, data })
    }

    pub fn constant(horizon: usize, u: &[f64]) -> Self {
        Self {
            n_u: u.len(),
            data: u.iter().copied().cycle().take(horizon * u.len()).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.data.len() / self.n_u
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn at(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_u..(t + 1) * self.n_u]
    }
    pub fn at_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.n_u..(t + 1) * self.n_u]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Drops the first control and zero-pads the tail.
    pub fn shifted(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        data.extend_from_slice(&self.data[self.n_u.min(self.data.len())..]);
        data.resize(self.data.len(), 0.0);
        Self { n_u: self.n_u, data }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `N x T x n_u` Gaussian perturbations with covariance `Σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePlan {
    pub seed: u64,
    samples: usize,
    horizon: usize,
    n_u: usize,
    draws: Vec<f64>,
}

impl NoisePlan {
    /// Draws are generated sequentially from the `(seed, stream, index)`
    /// generator, so the same key always reproduces the same plan.
    pub fn generate(
        seed: u64,
        stream: u64,
        index: u64,
        samples: usize,
        horizon: usize,
        sigma: &ControlCovariance,
    ) -> Self {
        let n_u = sigma.dim();
        let l = sigma.cholesky();
        let mut rng = stream_rng(seed, stream, index);
        let mut draws = vec![0.0; samples * horizon * n_u];
        let mut z = vec![0.0; n_u];
        for chunk in draws.chunks_exact_mut(n_u) {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..n_u {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l[(i, j)] * z[j];
                }
                chunk[i] = acc;
            }
        }
        Self {
            seed,
            samples,
            horizon,
            n_u,
            draws,
        }
    }

    pub fn zeros(samples: usize, horizon: usize, n_u: usize) -> Self {
        Self {
            seed: 0,
            samples,
            horizon,
            n_u,
            draws: vec![0.0; samples * horizon * n_u],
        }
    }

    pub fn from_draws(samples: usize, horizon: usize, n_u: usize, draws: Vec<f64>) -> Result<Self> {
        check_dim("noise draws", samples * horizon * n_u, draws.len())?;
        Ok(Self {
            seed: 0,
            samples,
            horizon,
            n_u,
            draws,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn eps(&self, n: usize, t: usize) -> &[f64] {
        let start = (n * self.horizon + t) * self.n_u;
        &self.draws[start..start + self.n_u]
    }
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.horizon * self.n_u;
        &self.draws[n * len..(n + 1) * len]
    }
    pub fn draws(&self) -> &[f64] {
        &self.draws
    }

    /// `U + ε^n`.
    pub fn perturbed(&self, u: &ControlSequence, n: usize) -> ControlSequence {
        ControlSequence {
            n_u: self.n_u,
            data: u.data.iter().zip(self.sample(n)).map(|(a, e)| a + e).collect(),
        }
    }

    fn check_against(&self, u: &ControlSequence) -> Result<()> {
        check_dim("noise horizon", u.horizon(), self.horizon)?;
        check_dim("noise control dim", u.n_u(), self.n_u)
    }
}

/// Evaluates `f(0..n)` in index order, in parallel when enabled.
pub(crate) fn map_samples<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreeEnergyEstimate {
    pub value: f64,
    pub samples: usize,
    pub min_cost: f64,
    /// Standard deviation over repeated estimates, when computed.
    pub spread: Option<f64>,
}

fn check_costs(costs: &[f64]) -> Result<f64> {
    if costs.is_empty() {
        return Err(Error::Empty("cost batch"));
    }
    let mut min = f64::INFINITY;
    for &c in costs {
        if !c.is_finite() {
            return Err(Error::NonFinite("cost batch"));
        }
        min = min.min(c);
    }
    Ok(min)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "lambda",
            reason: format!("must be positive and finite, got {lambda}"),
        })
    }
}

/// `-λ log((1/N) Σ exp(-S_n / λ))`, evaluated around the minimum cost.
pub fn free_energy_mc(costs: &[f64], lambda: f64) -> Result<FreeEnergyEstimate> {
    check_lambda(lambda)?;
    let min = check_costs(costs)?;
    let sum: f64 = costs.iter().map(|c| (-(c - min) / lambda).exp()).sum();
    let n = costs.len() as f64;
    let value = min - lambda * (sum / n).ln();
    Ok(FreeEnergyEstimate {
        value,
        samples: costs.len(),
        min_cost: min,
        spread: None,
    })
}

/// Normalized `exp(-S_n / λ)`.
pub fn softmax_weights(costs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let min = check_costs(costs)?;
    let mut w: Vec<f64> = costs.iter().map(|c| (-(c - min) / lambda).exp()).collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateSampling("all weights underflowed".into()));
    }
    for wi in &mut w {
        *wi /= sum;
    }
    Ok(w)
}

/// `Σ_n w̄_n ε_t^n` for a single timestep.
pub fn weighted_noise_at(weights: &[f64], plan: &NoisePlan, t: usize) -> Vec<f64> {
    let mut acc = vec![0.0; plan.n_u()];
    for (n, w) in weights.iter().enumerate() {
        for (a, e) in acc.iter_mut().zip(plan.eps(n, t)) {
            *a += w * e;
        }
    }
    acc
}

/// `U'_t = U_t + Σ_n w̄_n ε_t^n`. Weights need not be normalized.
pub fn mppi_update(u: &ControlSequence, weights: &[f64], plan: &NoisePlan) -> Result<ControlSequence> {
    plan.check_against(u)?;
    check_dim("weights", plan.samples(), weights.len())?;
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidParameter {
            name: "weights",
            reason: "must be finite and nonnegative".into(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateSampling("all sample weights are zero".into()));
    }
    let mut out = u.clone();
    for (n, w) in weights.iter().enumerate() {
        let wn = w / sum;
        for (o, e) in out.data.iter_mut().zip(plan.sample(n)) {
            *o += wn * e;
        }
    }
    Ok(out)
}

/// Importance-sampling weights of perturbed sequences `V_n` drawn around `U`,
/// targeting the optimal density `exp(-S/λ) p(V) / η` with zero-mean base
/// density `p`:
///
/// `w_n ∝ exp(-S_n / λ - Σ_t (v_t - u_t / 2)^T Σ^{-1} u_t)`,
///
/// i.e. `exp(-S_n/λ) p(V_n) / q(V_n)`. Returned weights sum to one.
pub fn is_weights(
    perturbed: &[ControlSequence],
    u: &ControlSequence,
    sigma: &ControlCovariance,
    lambda: f64,
    costs: &[f64],
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    check_dim("is_weights costs", perturbed.len(), costs.len())?;
    check_costs(costs)?;
    let mut logw = Vec::with_capacity(costs.len());
    for (v, s) in perturbed.iter().zip(costs) {
        check_dim("is_weights horizon", u.horizon(), v.horizon())?;
        let mut corr = 0.0;
        let mut half = vec![0.0; u.n_u()];
        for t in 0..u.horizon() {
            let ut = u.at(t);
            for ((h, vi), ui) in half.iter_mut().zip(v.at(t)).zip(ut) {
                *h = vi - 0.5 * ui;
            }
            corr += sigma.inner(&half, ut);
        }
        logw.push(-s / lambda - corr);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= sum;
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    /// State cost plus control terms, per sample.
    pub costs: Vec<f64>,
    pub crashed: Vec<bool>,
}

impl RolloutBatch {
    pub fn all_crashed(&self) -> bool {
        !self.crashed.is_empty() && self.crashed.iter().all(|c| *c)
    }
}

/// Per-sample path cost of the nominal dynamics under `U + ε^n`, plus
/// `λ/2 (u^T Σ^{-1} u + 2 u^T Σ^{-1} ε)` control terms.
pub fn rollout_batch(
    model: &SystemModel,
    cost: &CostFunction,
    x0: &State,
    u: &ControlSequence,
    plan: &NoisePlan,
    crash_cost: f64,
) -> Result<RolloutBatch> {
    rollout_batch_scaled(model, cost, x0, u, plan, crash_cost, ControlCostScale::Full)
}

pub fn rollout_batch_scaled(
    model: &SystemModel,
    cost: &CostFunction,
    x0: &State,
    u: &ControlSequence,
    plan: &NoisePlan,
    crash_cost: f64,
    scale: ControlCostScale,
) -> Result<RolloutBatch> {
    check_dim("rollout state", model.n_x(), x0.len())?;
    check_dim("rollout control", model.n_u(), u.n_u())?;
    plan.check_against(u)?;
    let results = map_samples(plan.samples(), |n| {
        rollout_one(model, cost, x0.as_slice(), u, plan, n, crash_cost, scale)
    });
    let (costs, crashed) = results.into_iter().unzip();
    Ok(RolloutBatch { costs, crashed })
}

#[allow(clippy::too_many_arguments)]
fn rollout_one(
    model: &SystemModel,
    cost: &CostFunction,
    x0: &[f64],
    u: &ControlSequence,
    plan: &NoisePlan,
    n: usize,
    crash_cost: f64,
    scale: ControlCostScale,
) -> (f64, bool) {
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut state_cost = 0.0;
    let mut control = 0.0;
    for t in 0..u.horizon() {
        let eps = plan.eps(n, t);
        state_cost += cost.running_cost(&x);
        model.step_sum_into(&x, &[u.at(t), eps], &mut next);
        std::mem::swap(&mut x, &mut next);
        if x.iter().any(|v| !v.is_finite()) {
            return (crash_cost, true);
        }
        control += control_cost_term(cost, u.at(t), eps, scale);
    }
    state_cost += cost.terminal_cost(&x);
    let total = state_cost + control;
    if total.is_finite() {
        (total, false)
    } else {
        (crash_cost, true)
    }
}

/// Savitzky–Golay smoothing (window 5, quadratic) along time, with the
/// endpoints replicated. Sequences shorter than the window pass through.
pub fn savitzky_golay(u: &ControlSequence) -> ControlSequence {
    const C: [f64; 5] = [-3.0, 12.0, 17.0, 12.0, -3.0];
    let h = u.horizon();
    if h < 5 {
        return u.clone();
    }
    let mut out = u.clone();
    for t in 0..h {
        for i in 0..u.n_u() {
            let mut acc = 0.0;
            for (k, c) in C.iter().enumerate() {
                let s = (t as isize + k as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += c * u.at(s)[i];
            }
            out.at_mut(t)[i] = acc / 35.0;
        }
    }
    out
}

/// Writes `sample,cost,weight` rows.
pub fn write_batch_csv<W: Write>(out: W, costs: &[f64], weights: &[f64]) -> Result<()> {
    check_dim("batch export", costs.len(), weights.len())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample", "cost", "weight"])?;
    for (i, (c, wt)) in costs.iter().zip(weights).enumerate() {
        w.write_record([i.to_string(), c.to_string(), wt.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
