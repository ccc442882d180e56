//! Majorization-minimization MAP reconstruction.
//!
//! Each step solves `(AᴴA/ζ² + L·I) x_{n+1} = Aᴴb/ζ² + L·x_n − ∇E(x_n)` by
//! conjugate gradient, with `ζ = η/σ_f`. Its fixed points are the
//! stationary points of `f_ζ(x) = ‖Ax − b‖²/(2ζ²) + E(x)`, which is what
//! the iteration descends.

use serde::{Deserialize, Serialize};

use crate::energy::{score_lipschitz_bound, Ball, ScoreField};
use crate::error::{Error, Result};
use crate::linalg::conjugate_gradient;
use crate::mri::ForwardOperator;
use crate::rng::{seeded, uniform_in_ball};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Measurement noise standard deviation η.
    pub eta: f64,
    /// Smoothness constant L; `None` means `(2 − m)·safety`.
    pub smoothness: Option<f64>,
    pub smoothness_safety: f64,
    pub max_iterations: usize,
    /// Stop when `‖x_{n+1} − x_n‖ / ‖x_n‖` falls below this.
    pub tolerance: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            smoothness: None,
            smoothness_safety: 1.1,
            max_iterations: 200,
            tolerance: 1e-6,
            cg_tolerance: 1e-10,
            cg_max_iterations: 200,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("solver.eta must be positive, got {}", self.eta)));
        }
        if let Some(l) = self.smoothness {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("solver.smoothness must be positive, got {l}")));
            }
        }
        if !(self.smoothness_safety >= 1.0) {
            return Err(Error::Config(format!(
                "solver.smoothness_safety must be ≥ 1, got {}",
                self.smoothness_safety
            )));
        }
        if !(self.tolerance > 0.0) || !(self.cg_tolerance > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.max_iterations == 0 || self.cg_max_iterations == 0 {
            return Err(Error::Config("solver iteration limits must be positive".into()));
        }
        Ok(())
    }

    /// `ζ = η/σ_f`.
    pub fn zeta(&self, sigma_f: f64) -> f64 {
        self.eta / sigma_f
    }

    /// L, from the configured value or the certified bound for modulus `m`.
    pub fn resolved_smoothness(&self, m: f64) -> Result<f64> {
        match self.smoothness {
            Some(l) => Ok(l),
            None => Ok(score_lipschitz_bound(m)? * self.smoothness_safety),
        }
    }
}

/// The linear system and weights shared by every MM step of one solve.
#[derive(Clone, Copy, Debug)]
pub struct MmWeights {
    pub zeta: f64,
    pub smoothness: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

/// Iterate and histories of a solve.
#[derive(Clone, Debug, Serialize)]
pub struct MMState<T: Real> {
    #[serde(skip)]
    pub x: Tensor<T>,
    /// `f_ζ(x_n)`, the function the iteration descends; one entry per iterate.
    pub objective: Vec<f64>,
    /// `‖Ax_n − b‖²/(2η²) + E(x_n)` for the same iterates.
    pub map_objective: Vec<f64>,
    /// `‖x_{n+1} − x_n‖ / ‖x_n‖`.
    pub changes: Vec<f64>,
    /// `‖∇f_ζ(x_n)‖ / ‖∇f_ζ(x_0)‖`.
    pub stationarity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Inner solves that stopped at their iteration cap.
    pub cg_failures: usize,
}

impl<T: Real> MMState<T> {
    pub fn final_stationarity(&self) -> f64 {
        self.stationarity.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest increase of the tracked objective between iterates.
    pub fn max_increase(&self) -> f64 {
        self.objective
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `‖Ax − b‖²/(2η²) + E(x)`.
pub fn objective<T: Real, F: ScoreField<T>>(
    field: &F,
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
    eta: f64,
) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("η must be positive, got {eta}")));
    }
    let r = op.apply(x)?.sub(b)?;
    Ok(r.norm_sq().as_f64() / (2.0 * eta * eta) + field.energy(x)?.as_f64())
}

/// The majorized objective `‖Ax − b‖²/(2ζ²) + E(x)`.
pub fn mm_objective<T: Real, F: ScoreField<T>>(
    field: &F,
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
    zeta: f64,
) -> Result<f64> {
    objective(field, op, b, x, zeta)
}

/// One MM update from `x_n` given `h = ∇E(x_n)`.
fn mm_update<T: Real>(
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x_n: &Tensor<T>,
    h: &Tensor<T>,
    w: &MmWeights,
) -> Result<(Tensor<T>, bool)> {
    let inv_z2 = T::of_f64(1.0 / (w.zeta * w.zeta));
    let l = T::of_f64(w.smoothness);
    let rhs = op.adjoint(b)?.scale(inv_z2).axpy(l, x_n)?.sub(h)?;
    let out = conjugate_gradient(
        |v| op.normal(v)?.scale(inv_z2).axpy(l, v),
        &rhs,
        Some(x_n),
        w.cg_tolerance,
        w.cg_max_iterations,
    )?;
    Ok((out.x, out.converged))
}

/// `x_{n+1}` from `x_n`.
pub fn mm_step<T: Real, F: ScoreField<T>>(
    field: &F,
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x_n: &Tensor<T>,
    w: &MmWeights,
) -> Result<Tensor<T>> {
    let h = field.score(x_n)?;
    let (x, converged) = mm_update(op, b, x_n, &h, w)?;
    if !converged {
        log::warn!("MM inner solve did not reach its tolerance; using the best iterate");
    }
    Ok(x)
}

pub fn weights<F: ScoreField<T>, T: Real>(field: &F, cfg: &SolverConfig, m: f64) -> Result<MmWeights> {
    cfg.validate()?;
    Ok(MmWeights {
        zeta: cfg.zeta(field.sigma_f()),
        smoothness: cfg.resolved_smoothness(m)?,
        cg_tolerance: cfg.cg_tolerance,
        cg_max_iterations: cfg.cg_max_iterations,
    })
}

/// Runs MM from `x0` until the relative iterate change drops below the
/// tolerance or the iteration cap is reached.
///
/// `m` is the training modulus, used for the default smoothness constant.
pub fn solve<T: Real, F: ScoreField<T>>(
    field: &F,
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x0: &Tensor<T>,
    cfg: &SolverConfig,
    m: f64,
) -> Result<(Tensor<T>, MMState<T>)> {
    let w = weights(field, cfg, m)?;
    let eta = cfg.eta;
    let inv_z2 = 1.0 / (w.zeta * w.zeta);
    let mut x = x0.clone();
    let mut state = MMState {
        x: x0.clone(),
        objective: Vec::new(),
        map_objective: Vec::new(),
        changes: Vec::new(),
        stationarity: Vec::new(),
        iterations: 0,
        converged: false,
        cg_failures: 0,
    };
    let mut g0 = None;
    loop {
        let (e, h) = field.energy_and_score(&x)?;
        let r = op.apply(&x)?.sub(b)?;
        let rr = r.norm_sq().as_f64();
        let e = e.as_f64();
        let f = rr * inv_z2 / 2.0 + e;
        let g = op.adjoint(&r)?.scale(T::of_f64(inv_z2)).add(&h)?;
        let gn = g.norm().as_f64();
        let g0n = *g0.get_or_insert(gn);
        if !f.is_finite() || !gn.is_finite() {
            state.x = x;
            return Err(Error::Numerical(format!(
                "non-finite objective at MM iteration {} (f = {f}, ‖∇f‖ = {gn}); last finite objective {:?}",
                state.iterations,
                state.objective.last()
            )));
        }
        state.objective.push(f);
        state.map_objective.push(rr / (2.0 * eta * eta) + e);
        state.stationarity.push(if g0n > 0.0 { gn / g0n } else { 0.0 });
        if state.converged || state.iterations >= cfg.max_iterations {
            break;
        }
        let (next, ok) = mm_update(op, b, &x, &h, &w)?;
        if !ok {
            state.cg_failures += 1;
            log::warn!("MM inner solve did not reach its tolerance at iteration {}", state.iterations);
        }
        let xn = x.norm().as_f64();
        let change = next.sub(&x)?.norm().as_f64() / if xn > 0.0 { xn } else { 1.0 };
        state.changes.push(change);
        state.iterations += 1;
        x = next;
        if change < cfg.tolerance {
            state.converged = true;
        }
    }
    state.x = x.clone();
    Ok((x, state))
}

/// Outcome of restarting the solver from random points near a solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UniquenessProbe {
    pub inits: usize,
    /// `‖x_k − x*‖ / ‖x*‖` per initialization.
    pub distances: Vec<f64>,
    pub tolerance: f64,
    pub agree: bool,
}

/// Solves again from `inits` uniform points in `B_δ(x*)` and checks that
/// every run lands within `tolerance` (relative) of `x*`.
#[allow(clippy::too_many_arguments)]
pub fn uniqueness_probe<T: Real, F: ScoreField<T>>(
    field: &F,
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x_star: &Tensor<T>,
    delta: f64,
    inits: usize,
    tolerance: f64,
    cfg: &SolverConfig,
    m: f64,
    seed: u64,
) -> Result<UniquenessProbe> {
    let mut rng = seeded(seed, 0);
    let ball = Ball::new(x_star.clone(), T::of_f64(delta))?;
    let starts: Vec<Tensor<T>> = (0..inits)
        .map(|_| uniform_in_ball(&mut rng, &ball.center, ball.radius))
        .collect();
    let scale = x_star.norm().as_f64().max(f64::MIN_POSITIVE);
    let mut distances = Vec::with_capacity(inits);
    for s in &starts {
        let (x, _) = solve(field, op, b, s, cfg, m)?;
        distances.push(x.sub(x_star)?.norm().as_f64() / scale);
    }
    let agree = distances.iter().all(|&d| d <= tolerance);
    Ok(UniquenessProbe {
        inits,
        distances,
        tolerance,
        agree,
    })
}
