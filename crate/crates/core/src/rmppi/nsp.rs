use std::f64::consts::PI;

use serde::Serialize;

use crate::costs::{ControlCostScale, CostFunction};
use crate::dynamics::{State, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::sampling::{free_energy_mc, rollout_batch_scaled, ControlSequence, NoisePlan};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NominalDecision {
    pub chosen_index: usize,
    pub candidates: Vec<Vec<f64>>,
    pub free_energies: Vec<f64>,
    pub feasible: Vec<bool>,
    #[serde(skip)]
    pub controls: ControlSequence,
}

impl NominalDecision {
    pub fn chosen_state(&self) -> State {
        State::from_column_slice(&self.candidates[self.chosen_index])
    }

    pub fn chosen_free_energy(&self) -> f64 {
        self.free_energies[self.chosen_index]
    }

    pub fn last_index(&self) -> usize {
        self.candidates.len() - 1
    }
}

fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// `b - a`, with angular components taken the short way round.
fn difference(model: &SystemModel, a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .zip(&model.angular)
        .map(|((ai, bi), ang)| if *ang { wrap(bi - ai) } else { bi - ai })
        .collect()
}

fn lerp(model: &SystemModel, a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    let d = difference(model, a, b);
    a.iter().zip(&d).map(|(ai, di)| ai + s * di).collect()
}

/// `r + 1` points along `prev → prop → x`: index 0 is `prev`, index `r/2`
/// is `prop` and index `r` is `x`. Odd `r` puts the knee between samples.
pub fn candidate_states(model: &SystemModel, prev: &State, prop: &State, x: &State, r: usize) -> Vec<Vec<f64>> {
    let mid = r as f64 / 2.0;
    (0..=r)
        .map(|i| {
            let i = i as f64;
            if i == r as f64 {
                x.as_slice().to_vec()
            } else if i <= mid {
                lerp(model, prev.as_slice(), prop.as_slice(), i / mid)
            } else {
                lerp(model, prop.as_slice(), x.as_slice(), (i - mid) / (r as f64 - mid))
            }
        })
        .collect()
}

/// Chooses the next nominal state: the candidate closest to `x` whose
/// reduced-sample free energy is at most `alpha`, or candidate 0 if none is.
/// Candidate 0 keeps `u`; every other candidate uses `u` shifted by one step.
/// All candidates share `plan`.
#[allow(clippy::too_many_arguments)]
pub fn nominal_state_propagation(
    model: &SystemModel,
    cost: &CostFunction,
    x: &State,
    x_prev: &State,
    x_prop: &State,
    u: &ControlSequence,
    r: usize,
    plan: &NoisePlan,
    alpha: f64,
    crash_cost: f64,
) -> Result<NominalDecision> {
    if r < 2 {
        return Err(Error::InvalidParameter {
            name: "nsp_candidates",
            reason: format!("need at least 2, got {r}"),
        });
    }
    check_dim("nsp real state", model.n_x(), x.len())?;
    check_dim("nsp previous nominal", model.n_x(), x_prev.len())?;
    check_dim("nsp propagated nominal", model.n_x(), x_prop.len())?;
    let candidates = candidate_states(model, x_prev, x_prop, x, r);
    let shifted = u.shifted();
    let mut free_energies = Vec::with_capacity(r + 1);
    for (i, p) in candidates.iter().enumerate() {
        let seq = if i == 0 { u } else { &shifted };
        let p = State::from_column_slice(p);
        let batch = rollout_batch_scaled(model, cost, &p, seq, plan, crash_cost, ControlCostScale::Smoothed)?;
        free_energies.push(free_energy_mc(&batch.costs, cost.lambda)?.value);
    }
    let feasible: Vec<bool> = free_energies.iter().map(|f| *f <= alpha).collect();
    let mut chosen = None;
    let mut best = f64::INFINITY;
    for (i, p) in candidates.iter().enumerate() {
        if !feasible[i] {
            continue;
        }
        let d: f64 = difference(model, x.as_slice(), p).iter().map(|v| v * v).sum::<f64>().sqrt();
        if d < best {
            best = d;
            chosen = Some(i);
        }
    }
    let chosen_index = chosen.unwrap_or(0);
    let controls = if chosen_index == 0 { u.clone() } else { shifted };
    Ok(NominalDecision {
        chosen_index,
        candidates,
        free_energies,
        feasible,
        controls,
    })
}
