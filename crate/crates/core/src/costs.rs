//! State, terminal and control costs.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use crate::dynamics::State;
use crate::error::{check_dim, Error, Result};
use crate::rng::{stream, stream_rng};

/// Nonnegative cost on states.
pub trait StateCost: Send + Sync {
    fn eval(&self, x: &[f64]) -> f64;
    /// Global Lipschitz constant, when known analytically.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantCost(pub f64);

impl StateCost for ConstantCost {
    fn eval(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Wraps a closure as a state cost.
pub struct FnCost<F> {
    f: F,
    lipschitz: Option<f64>,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> FnCost<F> {
    pub fn new(f: F) -> Self {
        Self { f, lipschitz: None }
    }
    pub fn with_lipschitz(f: F, l: f64) -> Self {
        Self {
            f,
            lipschitz: Some(l),
        }
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> StateCost for FnCost<F> {
    fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Diagonal quadratic pull toward a target plus linear walls outside
/// `[wall_lo, wall_hi]`, the sum clipped at `clip`:
///
/// `min(clip, Σ w_i (x_i - r_i)^2 + slope Σ (max(0, x_i - hi_i) + max(0, lo_i - x_i)))`
///
/// Infinite wall bounds disable the wall on that coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticWallCost {
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
    pub wall_lo: Vec<f64>,
    pub wall_hi: Vec<f64>,
    pub wall_slope: f64,
    pub clip: f64,
}

impl QuadraticWallCost {
    pub fn new(
        target: Vec<f64>,
        weights: Vec<f64>,
        wall_lo: Vec<f64>,
        wall_hi: Vec<f64>,
        wall_slope: f64,
        clip: f64,
    ) -> Result<Self> {
        let n = target.len();
        check_dim("cost weights", n, weights.len())?;
        check_dim("cost wall_lo", n, wall_lo.len())?;
        check_dim("cost wall_hi", n, wall_hi.len())?;
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: "must be finite and nonnegative".into(),
            });
        }
        if !(wall_slope >= 0.0 && wall_slope.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "wall_slope",
                reason: "must be finite and nonnegative".into(),
            });
        }
        if !(clip > 0.0) {
            return Err(Error::InvalidParameter {
                name: "clip",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            target,
            weights,
            wall_lo,
            wall_hi,
            wall_slope,
            clip,
        })
    }

    /// Pure quadratic with no walls and no clip.
    pub fn quadratic(target: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = target.len();
        Self::new(
            target,
            weights,
            vec![f64::NEG_INFINITY; n],
            vec![f64::INFINITY; n],
            0.0,
            f64::INFINITY,
        )
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * factor).collect(),
            wall_slope: self.wall_slope * factor,
            clip: self.clip * factor,
            ..self.clone()
        }
    }

    fn walled_dims(&self) -> usize {
        self.wall_lo
            .iter()
            .zip(&self.wall_hi)
            .filter(|(lo, hi)| lo.is_finite() || hi.is_finite())
            .count()
    }
}

impl StateCost for QuadraticWallCost {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut c = 0.0;
        for i in 0..self.target.len() {
            let d = x[i] - self.target[i];
            c += self.weights[i] * d * d;
            let over = (x[i] - self.wall_hi[i]).max(0.0) + (self.wall_lo[i] - x[i]).max(0.0);
            c += self.wall_slope * over;
        }
        c.min(self.clip)
    }

    /// Where the clip is inactive, `Σ w_i d_i^2 < clip`, which bounds the
    /// quadratic gradient by `2 sqrt(w_max clip)`; each wall adds `slope`
    /// along its own axis.
    fn lipschitz(&self) -> Option<f64> {
        let w_max = self.weights.iter().copied().fold(0.0, f64::max);
        let quad = if w_max == 0.0 {
            0.0
        } else if self.clip.is_finite() {
            2.0 * (w_max * self.clip).sqrt()
        } else {
            return None;
        };
        Some(quad + self.wall_slope * (self.walled_dims() as f64).sqrt())
    }
}

/// Control-noise covariance with its inverse and lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlCovariance {
    sigma: DMatrix<f64>,
    inv: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl ControlCovariance {
    pub fn new(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: "must be a nonempty square matrix".into(),
            });
        }
        if (&sigma - sigma.transpose()).amax() > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite("sigma is not symmetric"));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("sigma"))?;
        let inv = chol.inverse();
        let l = chol.unpack();
        Ok(Self {
            sigma,
            inv,
            chol: l,
        })
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
            variances,
        )))
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }
    /// Lower-triangular `L` with `L L^T = Σ`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `a^T Σ^{-1} b`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.inv[(i, j)] * b[j];
            }
            acc += a[i] * row;
        }
        acc
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.sigma * c)
    }
}

/// Which control-penalty coefficient a call site uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlCostScale {
    /// `λ / 2`: the importance-sampling correction of the nominal system.
    Full,
    /// `λ (1 - β) / 2`: the smoothed penalty of the real system and of
    /// nominal-state candidate evaluation.
    Smoothed,
}

#[derive(Clone)]
pub struct CostFunction {
    pub running: Arc<dyn StateCost>,
    pub terminal: Arc<dyn StateCost>,
    pub sigma: ControlCovariance,
    /// Inverse temperature, > 0.
    pub lambda: f64,
    /// Control-cost smoothing parameter.
    pub beta: f64,
}

impl fmt::Debug for CostFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostFunction")
            .field("sigma", &self.sigma)
            .field("lambda", &self.lambda)
            .field("beta", &self.beta)
            .finish_non_exhaustive()
    }
}

impl CostFunction {
    pub fn new(
        running: Arc<dyn StateCost>,
        terminal: Arc<dyn StateCost>,
        sigma: ControlCovariance,
        lambda: f64,
        beta: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda",
                reason: format!("must be positive and finite, got {lambda}"),
            });
        }
        // β = 0 is accepted so the smoothed and full penalties can coincide.
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must lie in [0, 1), got {beta}"),
            });
        }
        Ok(Self {
            running,
            terminal,
            sigma,
            lambda,
            beta,
        })
    }

    pub fn n_u(&self) -> usize {
        self.sigma.dim()
    }

    pub fn running_cost(&self, x: &[f64]) -> f64 {
        self.running.eval(x)
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.terminal.eval(x)
    }

    pub fn coefficient(&self, scale: ControlCostScale) -> f64 {
        match scale {
            ControlCostScale::Full => self.lambda / 2.0,
            ControlCostScale::Smoothed => self.lambda * (1.0 - self.beta) / 2.0,
        }
    }

    /// Analytic `(L_q, L_φ)` when both costs provide them.
    pub fn lipschitz_constants(&self) -> Option<(f64, f64)> {
        Some((self.running.lipschitz()?, self.terminal.lipschitz()?))
    }
}

/// `φ(x_T) + Σ_{t<T} q(x_t)` over a trajectory of `T + 1` states.
pub fn path_cost(cost: &CostFunction, trajectory: &[State]) -> Result<f64> {
    let (last, head) = trajectory
        .split_last()
        .ok_or(Error::Empty("trajectory needs at least one state"))?;
    let mut s = 0.0;
    for x in head {
        s += cost.running_cost(x.as_slice());
    }
    Ok(s + cost.terminal_cost(last.as_slice()))
}

/// `c (u^T Σ^{-1} u + 2 u^T Σ^{-1} ε)` with `c` picked by `scale`.
pub fn control_cost_term(cost: &CostFunction, u: &[f64], eps: &[f64], scale: ControlCostScale) -> f64 {
    let s = &cost.sigma;
    cost.coefficient(scale) * (s.inner(u, u) + 2.0 * s.inner(u, eps))
}

/// Axis-aligned sampling domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim("domain", lo.len(), hi.len())?;
        if lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "domain",
                reason: "box must be finite with positive volume".into(),
            });
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzEstimate {
    pub running: f64,
    pub terminal: f64,
    pub pairs: usize,
}

/// Largest observed slope over random pairs in `domain`. A lower bound on the
/// true constants.
pub fn lipschitz_estimate(
    cost: &CostFunction,
    domain: &BoxDomain,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if n_pairs == 0 {
        return Err(Error::InvalidParameter {
            name: "n_pairs",
            reason: "need at least one pair".into(),
        });
    }
    let mut rng = stream_rng(seed, stream::LIPSCHITZ, 0);
    let (mut lq, mut lphi) = (0.0f64, 0.0f64);
    for _ in 0..n_pairs {
        let a = domain.sample(&mut rng);
        let b = domain.sample(&mut rng);
        let dist = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        lq = lq.max((cost.running_cost(&a) - cost.running_cost(&b)).abs() / dist);
        lphi = lphi.max((cost.terminal_cost(&a) - cost.terminal_cost(&b)).abs() / dist);
    }
    Ok(LipschitzEstimate {
        running: lq,
        terminal: lphi,
        pairs: n_pairs,
    })
}
