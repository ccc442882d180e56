//! Denoising score matching with a local Lipschitz penalty on `T = I − H`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, GradMode, Var};
use crate::energy::{Ball, EnergyModel, ScoreField};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{normal_tensor, seeded, stream_id, uniform_in_ball, unit_direction, TaskRng};
use crate::scalar::{Precision, Real};
use crate::tensor::Tensor;
use crate::verify::probe_monotonicity;

const STREAM_NOISE: u32 = 1;
const STREAM_PROBE: u32 = 2;
const STREAM_SHUFFLE: u32 = 3;
const STREAM_HELDOUT: u32 = 4;

/// Relative size of the separation floor `‖x1 − x2‖ ≥ floor·δ`.
pub const SEPARATION_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sigma_max: f64,
    pub m: f64,
    /// Ball radius; `None` means "take it from the SENSE deviation of the data".
    pub delta: Option<f64>,
    pub lambda: f64,
    /// λ is multiplied by this every `ramp_every` epochs while the fraction of
    /// violating probes exceeds `violation_tolerance`.
    pub lambda_ramp: f64,
    pub ramp_every: usize,
    pub violation_tolerance: f64,
    pub ascent_steps: usize,
    /// Defaults to δ/10.
    pub ascent_step_size: Option<f64>,
    /// Also ascend from a fresh random pair on every visit and keep the better probe.
    pub fresh_restarts: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sampled pairs per held-out ball for the per-epoch m′ estimate.
    pub heldout_pairs: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma_max: 0.1,
            m: 0.1,
            delta: None,
            lambda: 10.0,
            lambda_ramp: 2.0,
            ramp_every: 5,
            violation_tolerance: 0.01,
            ascent_steps: 15,
            ascent_step_size: None,
            fresh_restarts: false,
            batch_size: 8,
            epochs: 50,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            heldout_pairs: 32,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Lipschitz target `l = 1 − m`.
    pub fn l(&self) -> f64 {
        1.0 - self.m
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_max", self.sigma_max),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("lambda_ramp", self.lambda_ramp),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(self.m > 0.0 && self.m < 1.0) {
            return Err(Error::Config(format!("train.m must lie in (0, 1), got {}", self.m)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("train.lambda must be ≥ 0, got {}", self.lambda)));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("train.delta must be positive, got {d}")));
            }
        }
        if let Some(s) = self.ascent_step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("train.ascent_step_size must be positive, got {s}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.ramp_every == 0 {
            return Err(Error::Config(
                "train.batch_size, train.epochs and train.ramp_every must be positive".into(),
            ));
        }
        Ok(())
    }

    fn resolved_delta(&self) -> Result<f64> {
        self.delta
            .ok_or_else(|| Error::Config("train.delta is unset; derive it from the data first".into()))
    }
}

/// The pair realizing a local Lipschitz estimate of `T` inside a ball.
#[derive(Clone, Debug)]
pub struct LipschitzProbe<T: Real> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub ratio: f64,
}

/// `mean ‖H(x + σz) − σz‖²` over the batch.
pub fn dsm_loss<T: Real>(
    model: &EnergyModel<T>,
    batch: &[Tensor<T>],
    sigmas: &[f64],
    noise: &[Tensor<T>],
) -> Result<T> {
    check_dsm_inputs(batch, sigmas, noise)?;
    let terms = crate::par::map_slice(batch, |k, x| -> Result<T> {
        let sz = noise[k].scale(T::of_f64(sigmas[k]));
        let h = model.score(&x.add(&sz)?)?;
        Ok(h.sub(&sz)?.norm_sq())
    });
    let mut total = T::zero();
    for t in terms {
        total = total + t?;
    }
    Ok(total / T::of_f64(batch.len() as f64))
}

fn check_dsm_inputs<T: Real>(batch: &[Tensor<T>], sigmas: &[f64], noise: &[Tensor<T>]) -> Result<()> {
    if batch.is_empty() || batch.len() != sigmas.len() || batch.len() != noise.len() {
        return Err(Error::shape(
            "dsm_loss",
            format!(
                "batch of {} images with {} σ-samples and {} noise samples",
                batch.len(),
                sigmas.len(),
                noise.len()
            ),
        ));
    }
    for (x, z) in batch.iter().zip(noise) {
        x.check_same_shape(z, "dsm_loss")?;
    }
    Ok(())
}

/// One sample's `‖H_θ(x + σz) − σz‖²` as a graph node, differentiable in θ.
pub fn dsm_term<T: Real>(
    model: &EnergyModel<T>,
    params: &[Var<T>],
    x: &Tensor<T>,
    sigma: f64,
    z: &Tensor<T>,
) -> Result<Var<T>> {
    let sz = z.scale(T::of_f64(sigma));
    let y = Var::variable(x.add(&sz)?);
    let h = model.score_var(&y, params, GradMode::Record)?;
    Ok(h.sub(&Var::constant(sz))?.norm_sq())
}

/// `‖T_θ(x1) − T_θ(x2)‖ / ‖x1 − x2‖` at fixed endpoints, differentiable in θ.
pub fn ratio_term<T: Real>(
    model: &EnergyModel<T>,
    params: &[Var<T>],
    probe: &LipschitzProbe<T>,
) -> Result<Var<T>> {
    let v1 = Var::variable(probe.x1.clone());
    let v2 = Var::variable(probe.x2.clone());
    let h1 = model.score_var(&v1, params, GradMode::Record)?;
    let h2 = model.score_var(&v2, params, GradMode::Record)?;
    let sep = probe.x1.sub(&probe.x2)?;
    let d = Var::constant(sep.clone()).sub(&h1.sub(&h2)?)?;
    Ok(d.norm().scale(T::one() / sep.norm()))
}

/// `(ReLU(ratio − l))²`.
pub fn penalty_term(ratio: f64, l: f64) -> f64 {
    (ratio - l).max(0.0).powi(2)
}

/// `mean (ReLU(ratio − l))²` over probe ratios.
pub fn penalty_from_ratios(ratios: &[f64], l: f64) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().map(|&r| penalty_term(r, l)).sum::<f64>() / ratios.len() as f64
}

/// Penalty at the current θ for fixed probe endpoints.
pub fn penalty<T: Real>(model: &EnergyModel<T>, probes: &[LipschitzProbe<T>], l: f64) -> Result<f64> {
    let params = model.param_vars(false);
    let mut ratios = Vec::with_capacity(probes.len());
    for p in probes {
        ratios.push(ratio_term(model, &params, p)?.value().item().as_f64());
    }
    Ok(penalty_from_ratios(&ratios, l))
}

fn separate<T: Real>(ball: &Ball<T>, x1: &Tensor<T>, x2: Tensor<T>, rng: &mut TaskRng) -> Result<Tensor<T>> {
    let floor = SEPARATION_FLOOR * ball.radius.as_f64();
    let mut x2 = x2;
    let mut tries = 0;
    while x1.sub(&x2)?.norm().as_f64() < floor {
        let dir: Tensor<T> = unit_direction(rng, x1.shape());
        x2 = ball.project(&x1.axpy(ball.radius * T::of_f64(0.1), &dir)?)?;
        tries += 1;
        if tries > 100 {
            return Err(Error::Numerical("could not separate a degenerate probe pair".into()));
        }
    }
    Ok(x2)
}

fn check_in_ball<T: Real>(ball: &Ball<T>, u: &Tensor<T>) -> Result<()> {
    let dist = u.sub(&ball.center)?.norm().as_f64();
    let r = ball.radius.as_f64();
    let slack = if T::DTYPE_CODE == f32::DTYPE_CODE { 1e-5 } else { 1e-12 };
    if dist > r * (1.0 + slack) {
        return Err(Error::Numerical(format!(
            "probe left the ball: distance {dist:.6e} > δ = {r:.6e}"
        )));
    }
    Ok(())
}

struct PairEval<T: Real> {
    ratio: f64,
    g1: Tensor<T>,
    g2: Tensor<T>,
}

fn eval_pair<T: Real, F: ScoreField<T>>(field: &F, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<PairEval<T>> {
    let (d, j1, j2) = field.t_difference_vjp(x1, x2)?;
    let r = x1.sub(x2)?;
    let rn = r.norm().as_f64();
    let dn = d.norm().as_f64();
    let ratio = dn / rn;
    if !ratio.is_finite() {
        return Err(Error::Numerical(format!("non-finite Lipschitz ratio ({dn:e} / {rn:e})")));
    }
    // ∇_{x1} ρ = J1ᵀd/(‖d‖‖r‖) − ρ r/‖r‖²,  ∇_{x2} ρ = −J2ᵀd/(‖d‖‖r‖) + ρ r/‖r‖²
    let a = if dn > 0.0 { 1.0 / (dn * rn) } else { 0.0 };
    let b = ratio / (rn * rn);
    let g1 = j1.scale(T::of_f64(a)).axpy(T::of_f64(-b), &r)?;
    let g2 = j2.scale(T::of_f64(-a)).axpy(T::of_f64(b), &r)?;
    Ok(PairEval { ratio, g1, g2 })
}

/// Projected gradient ascent on the Lipschitz ratio of `T` from a given pair.
///
/// Steps are normalized to length `step_size` in the joint `(x1, x2)`
/// space and halved whenever a step fails to improve the ratio. `steps`
/// bounds the number of field evaluations after the initial one; budget
/// left over when the ascent stalls goes to fresh uniformly random pairs.
/// The best pair seen is returned.
pub fn ascend_pair<T: Real, F: ScoreField<T>>(
    field: &F,
    ball: &Ball<T>,
    x1: Tensor<T>,
    x2: Tensor<T>,
    steps: usize,
    step_size: f64,
    rng: &mut TaskRng,
) -> Result<LipschitzProbe<T>> {
    if !(step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("ascent step size must be positive, got {step_size}")));
    }
    let mut x1 = ball.project(&x1)?;
    let mut x2 = separate(ball, &x1, ball.project(&x2)?, rng)?;
    check_in_ball(ball, &x1)?;
    check_in_ball(ball, &x2)?;
    let mut cur = eval_pair(field, &x1, &x2)?;
    let mut best = LipschitzProbe {
        x1: x1.clone(),
        x2: x2.clone(),
        ratio: cur.ratio,
    };
    let mut alpha = step_size;
    let min_alpha = step_size * 1e-3;
    let mut evals = 0;
    while evals < steps {
        let gn = (cur.g1.norm_sq() + cur.g2.norm_sq()).as_f64().sqrt();
        if alpha < min_alpha || !(gn > 0.0) {
            // stalled: restart from a fresh pair
            x1 = uniform_in_ball(rng, &ball.center, ball.radius);
            x2 = separate(ball, &x1, uniform_in_ball(rng, &ball.center, ball.radius), rng)?;
            cur = eval_pair(field, &x1, &x2)?;
            evals += 1;
            alpha = step_size;
            if cur.ratio > best.ratio {
                best = LipschitzProbe {
                    x1: x1.clone(),
                    x2: x2.clone(),
                    ratio: cur.ratio,
                };
            }
            continue;
        }
        let s = T::of_f64(alpha / gn);
        let y1 = ball.project(&x1.axpy(s, &cur.g1)?)?;
        let y2 = separate(ball, &y1, ball.project(&x2.axpy(s, &cur.g2)?)?, rng)?;
        check_in_ball(ball, &y1)?;
        check_in_ball(ball, &y2)?;
        let next = eval_pair(field, &y1, &y2)?;
        evals += 1;
        if next.ratio >= cur.ratio {
            x1 = y1;
            x2 = y2;
            cur = next;
            alpha = (alpha * 1.5).min(step_size);
            if cur.ratio > best.ratio {
                best = LipschitzProbe {
                    x1: x1.clone(),
                    x2: x2.clone(),
                    ratio: cur.ratio,
                };
            }
        } else {
            alpha *= 0.5;
        }
    }
    Ok(best)
}

/// Local Lipschitz estimate of `T` on `B_δ(x)` from a uniformly random
/// starting pair.
pub fn local_lipschitz<T: Real, F: ScoreField<T>>(
    field: &F,
    x: &Tensor<T>,
    delta: f64,
    steps: usize,
    step_size: f64,
    seed: u64,
) -> Result<LipschitzProbe<T>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("δ must be positive, got {delta}")));
    }
    let ball = Ball::new(x.clone(), T::of_f64(delta))?;
    let mut rng = seeded(seed, 0);
    let x1 = uniform_in_ball(&mut rng, x, ball.radius);
    let x2 = uniform_in_ball(&mut rng, x, ball.radius);
    ascend_pair(field, &ball, x1, x2, steps, step_size, &mut rng)
}

/// Adam optimizer over a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("Adam::step", "parameter and gradient counts differ"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of_f64(self.beta1), T::of_f64(self.beta2));
        let (lr, eps) = (self.lr, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            p.check_same_shape(g, "Adam::step")?;
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (((mi, vi), pi), &gi) in md.iter_mut().zip(vd.iter_mut()).zip(pd.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = mi.as_f64() / c1;
                let vh = vi.as_f64() / c2;
                *pi = *pi - T::of_f64(lr * mh / (vh.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean DSM loss over the epoch.
    pub dsm: f64,
    /// Mean penalty over the epoch.
    pub penalty: f64,
    /// Largest probe ratio seen in the epoch.
    pub max_ratio: f64,
    /// Held-out monotonicity estimate at the end of the epoch.
    pub m_prime: f64,
    pub epoch: usize,
    pub lambda: f64,
    /// Fraction of probes with ratio above `l`.
    pub violation_rate: f64,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub model: EnergyModel<T>,
    pub history: Vec<EpochRecord>,
    pub probes: Vec<LipschitzProbe<T>>,
    pub final_lambda: f64,
}

struct SampleResult<T: Real> {
    grads: Vec<Tensor<T>>,
    dsm: f64,
    penalty: f64,
    probe: Option<LipschitzProbe<T>>,
}

fn param_norms<T: Real>(params: &[Tensor<T>]) -> String {
    params
        .iter()
        .map(|p| format!("{:.3e}", p.norm().as_f64()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Minimizes `dsm_loss + λ·penalty` with Adam.
///
/// `observer` is called after every epoch, e.g. to write checkpoints.
pub fn train<T: Real>(
    model: EnergyModel<T>,
    images: &[Tensor<T>],
    heldout: &[Tensor<T>],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &EnergyModel<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let delta = cfg.resolved_delta()?;
    let step_size = cfg.ascent_step_size.unwrap_or(delta / 10.0);
    let l = cfg.l();
    let n = images.len();
    let balls: Vec<Ball<T>> = images
        .iter()
        .map(|x| Ball::new(x.clone(), T::of_f64(delta)))
        .collect::<Result<_>>()?;
    let mut probes: Vec<LipschitzProbe<T>> = (0..n)
        .map(|i| {
            let mut rng = seeded(cfg.seed, stream_id(STREAM_PROBE, i as u64));
            LipschitzProbe {
                x1: uniform_in_ball(&mut rng, &images[i], balls[i].radius),
                x2: uniform_in_ball(&mut rng, &images[i], balls[i].radius),
                ratio: 0.0,
            }
        })
        .collect();

    let mut model = model;
    let mut params: Vec<Tensor<T>> = model.params().to_vec();
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut lambda = cfg.lambda;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut window_violations = (0usize, 0usize);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(cfg.seed, stream_id(STREAM_SHUFFLE, epoch as u64)));
        let (mut dsm_sum, mut pen_sum, mut max_ratio, mut violations, mut count) =
            (0.0, 0.0, 0.0f64, 0usize, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let current = &model;
            let use_probe = lambda > 0.0;
            let results = par::map_slice(batch, |_, &i| -> Result<SampleResult<T>> {
                let visit = (epoch * n + i) as u64;
                let mut rng = seeded(cfg.seed, stream_id(STREAM_NOISE, visit));
                let sigma = rng.gen_range(0.0..cfg.sigma_max);
                let z: Tensor<T> = normal_tensor(&mut rng, images[i].shape());
                let pvars = current.param_vars(true);
                let mut loss = dsm_term(current, &pvars, &images[i], sigma, &z)?;
                let dsm = loss.value().item().as_f64();
                let mut pen = 0.0;
                let mut probe = None;
                if use_probe {
                    let mut prng = seeded(cfg.seed, stream_id(STREAM_PROBE, visit + n as u64));
                    let warm = &probes[i];
                    let mut best = ascend_pair(
                        current,
                        &balls[i],
                        warm.x1.clone(),
                        warm.x2.clone(),
                        cfg.ascent_steps,
                        step_size,
                        &mut prng,
                    )?;
                    if cfg.fresh_restarts {
                        let f1 = uniform_in_ball(&mut prng, &images[i], balls[i].radius);
                        let f2 = uniform_in_ball(&mut prng, &images[i], balls[i].radius);
                        let fresh =
                            ascend_pair(current, &balls[i], f1, f2, cfg.ascent_steps, step_size, &mut prng)?;
                        if fresh.ratio > best.ratio {
                            best = fresh;
                        }
                    }
                    if best.ratio > l {
                        let r = ratio_term(current, &pvars, &best)?;
                        let excess = r.sub(&Var::constant(Tensor::scalar(T::of_f64(l))))?.relu();
                        let term = excess.square();
                        pen = term.value().item().as_f64();
                        loss = loss.add(&term.scale(T::of_f64(lambda)))?;
                    }
                    probe = Some(best);
                }
                let grads = grad(&loss, &pvars, GradMode::Detached)?.values();
                Ok(SampleResult {
                    grads,
                    dsm,
                    penalty: pen,
                    probe,
                })
            });

            let mut total: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            let inv = T::of_f64(1.0 / batch.len() as f64);
            let (mut b_dsm, mut b_pen) = (0.0, 0.0);
            for (res, &i) in results.into_iter().zip(batch) {
                let res = res?;
                for (t, g) in total.iter_mut().zip(&res.grads) {
                    t.add_assign_scaled(inv, g)?;
                }
                b_dsm += res.dsm;
                b_pen += res.penalty;
                if let Some(p) = res.probe {
                    max_ratio = max_ratio.max(p.ratio);
                    if p.ratio > l {
                        violations += 1;
                    }
                    probes[i] = p;
                }
                count += 1;
            }
            let finite = b_dsm.is_finite() && b_pen.is_finite() && total.iter().all(|g| g.is_finite());
            if !finite {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}, step {step}: dsm = {b_dsm}, penalty = {b_pen}, \
                     λ = {lambda}, parameter norms [{}]",
                    param_norms(&params)
                )));
            }
            adam.step(&mut params, &total)?;
            model = model.with_params(params.clone())?;
            step += 1;
            dsm_sum += b_dsm;
            pen_sum += b_pen;
        }

        let m_prime = if heldout.is_empty() || cfg.heldout_pairs == 0 {
            f64::NAN
        } else {
            probe_monotonicity(
                &model,
                heldout,
                delta,
                cfg.heldout_pairs,
                cfg.seed ^ stream_id(STREAM_HELDOUT, epoch as u64),
            )?
            .m_prime
        };
        let violation_rate = if lambda > 0.0 { violations as f64 / count as f64 } else { 0.0 };
        let record = EpochRecord {
            step,
            dsm: dsm_sum / count as f64,
            penalty: pen_sum / count as f64,
            max_ratio,
            m_prime,
            epoch,
            lambda,
            violation_rate,
        };
        log::info!(
            "epoch {epoch}: dsm {:.4e} penalty {:.3e} max ratio {:.4} m' {:.4} λ {lambda}",
            record.dsm,
            record.penalty,
            record.max_ratio,
            record.m_prime
        );
        observer(&record, &model)?;
        history.push(record);

        window_violations.0 += violations;
        window_violations.1 += count;
        if (epoch + 1) % cfg.ramp_every == 0 {
            let rate = window_violations.0 as f64 / window_violations.1.max(1) as f64;
            if lambda > 0.0 && rate > cfg.violation_tolerance {
                lambda *= cfg.lambda_ramp;
            }
            window_violations = (0, 0);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        probes,
        final_lambda: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{Activation, Init, NetworkSpec, QuadraticField};

    fn spec(layers: usize, channels: usize) -> NetworkSpec {
        NetworkSpec {
            layers,
            channels,
            ..NetworkSpec::default()
        }
    }

    fn random_model(layers: usize, channels: usize, seed: u64) -> EnergyModel<f64> {
        random_model_with(spec(layers, channels), seed)
    }

    fn random_model_with(spec: NetworkSpec, seed: u64) -> EnergyModel<f64> {
        let m = EnergyModel::init(spec, 1.0, Init::FanInUniform, seed).unwrap();
        let params = m.params().iter().map(|p| p.scale(0.5)).collect();
        let mut m = m.with_params(params).unwrap();
        let mut rng = seeded(seed, 9);
        let biased = m
            .params()
            .iter()
            .map(|p| if p.rank() == 1 { normal_tensor(&mut rng, p.shape()).scale(0.1) } else { p.clone() })
            .collect();
        m = m.with_params(biased).unwrap();
        m
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!(c.l(), 1.0 - c.m);
        assert_eq!(c.sigma_max, 0.1);
        assert_eq!(c.lambda, 10.0);
        assert_eq!(c.ascent_steps, 15);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { m: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { delta: Some(0.0), ..c.clone() }.validate().is_err());
        let err = serde_json::from_str::<TrainConfig>(r#"{"sigma_mx": 0.2}"#);
        assert!(err.is_err());
    }

    #[test]
    fn dsm_perfect_score_is_zero() {
        // Zero network with σ_f = 1 has H(u) = u, so a zero image with
        // σ-samples and noise yields H(σz) = σz exactly.
        let m = EnergyModel::<f64>::zeros(spec(2, 4), 1.0).unwrap();
        let z: Tensor<f64> = normal_tensor(&mut seeded(1, 0), &[2, 4, 4]);
        let x = Tensor::zeros(&[2, 4, 4]);
        assert_eq!(dsm_loss(&m, &[x], &[0.05], &[z]).unwrap(), 0.0);
    }

    #[test]
    fn dsm_zero_network_collapses_to_image_norm() {
        let m = EnergyModel::<f64>::zeros(spec(3, 4), 1.0).unwrap();
        let mut rng = seeded(2, 0);
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| normal_tensor(&mut rng, &[2, 5, 5])).collect();
        let zs: Vec<Tensor<f64>> = (0..3).map(|_| normal_tensor(&mut rng, &[2, 5, 5])).collect();
        let loss = dsm_loss(&m, &xs, &[0.01, 0.05, 0.09], &zs).unwrap();
        let expect = xs.iter().map(|x| x.norm_sq()).sum::<f64>() / 3.0;
        assert!((loss - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn dsm_matches_score_oracle_recomputation() {
        let m = random_model(3, 4, 3);
        let mut rng = seeded(3, 1);
        let xs: Vec<Tensor<f64>> = (0..2).map(|_| normal_tensor(&mut rng, &[2, 6, 6])).collect();
        let zs: Vec<Tensor<f64>> = (0..2).map(|_| normal_tensor(&mut rng, &[2, 6, 6])).collect();
        let sig = [0.03, 0.07];
        let loss = dsm_loss(&m, &xs, &sig, &zs).unwrap();
        // oracle: closed-form score (x − Ψ − J_Ψᵀ(x − Ψ))/σ_f² with J_Ψᵀ via autodiff of ⟨Ψ, r⟩
        let mut total = 0.0;
        for i in 0..2 {
            let y = xs[i].axpy(sig[i], &zs[i]).unwrap();
            let r = y.sub(&m.psi(&y).unwrap()).unwrap();
            let yv = Var::variable(y.clone());
            let pv = m.param_vars(false);
            let s = m.psi_var(&yv, &pv).unwrap().dot(&Var::constant(r.clone())).unwrap();
            let jt = grad(&s, &[yv], GradMode::Detached).unwrap().values().remove(0);
            let h = r.sub(&jt).unwrap();
            total += h.sub(&zs[i].scale(sig[i])).unwrap().norm_sq();
        }
        assert!((loss - total / 2.0).abs() < 1e-10 * loss.abs().max(1.0));
        let per = dsm_term(&m, &m.param_vars(true), &xs[0], sig[0], &zs[0]).unwrap();
        assert!(per.value().item() > 0.0);
        assert!(dsm_loss(&m, &xs, &sig[..1], &zs).is_err());
    }

    #[test]
    fn dsm_theta_gradient_matches_finite_differences() {
        let m = random_model(2, 4, 5);
        let mut rng = seeded(5, 1);
        let x: Tensor<f64> = normal_tensor(&mut rng, &[2, 8, 8]);
        let z: Tensor<f64> = normal_tensor(&mut rng, &[2, 8, 8]);
        let sigma = 0.07;
        let pv = m.param_vars(true);
        let loss = dsm_term(&m, &pv, &x, sigma, &z).unwrap();
        let g = grad(&loss, &pv, GradMode::Detached).unwrap().values();
        let eps = 1e-6;
        let mut rng = seeded(5, 2);
        for _ in 0..12 {
            let k = rng.gen_range(0..pv.len());
            let j = rng.gen_range(0..m.params()[k].numel());
            let eval = |delta: f64| {
                let mut ps = m.params().to_vec();
                ps[k].data_mut()[j] += delta;
                let mm = m.with_params(ps).unwrap();
                dsm_loss(&mm, &[x.clone()], &[sigma], &[z.clone()]).unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = g[k].data()[j];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}[{j}]: fd {fd} vs autodiff {an}");
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty_from_ratios(&[0.5, 0.89, 0.9], 0.9), 0.0);
        assert!((penalty_from_ratios(&[1.4], 0.9) - 0.25).abs() < 1e-12);
        assert!((penalty_from_ratios(&[0.8, 1.1], 0.9) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_vanishes_below_target() {
        let m = EnergyModel::<f64>::zeros(spec(2, 4), 2f64.sqrt()).unwrap();
        let c: Tensor<f64> = normal_tensor(&mut seeded(6, 0), &[2, 4, 4]);
        let p = local_lipschitz(&m, &c, 0.1, 5, 0.01, 1).unwrap();
        assert!((p.ratio - 0.5).abs() < 1e-12);
        assert_eq!(penalty(&m, &[p], 0.9).unwrap(), 0.0);
    }

    #[test]
    fn ratio_of_scaled_identity_maps() {
        let c: Tensor<f64> = normal_tensor(&mut seeded(7, 0), &[2, 4, 4]);
        for seed in 0..3 {
            let half = EnergyModel::<f64>::zeros(spec(2, 4), 2f64.sqrt()).unwrap();
            let p = local_lipschitz(&half, &c, 0.3 + seed as f64, 10, 0.05, seed).unwrap();
            assert!((p.ratio - 0.5).abs() < 1e-12);
            let steep = EnergyModel::<f64>::zeros(spec(2, 4), 0.1).unwrap();
            let p = local_lipschitz(&steep, &c, 0.2, 10, 0.02, seed).unwrap();
            assert!((p.ratio - 99.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pair_vjp_matches_generic_path() {
        let m = random_model(2, 4, 8);
        let mut rng = seeded(8, 0);
        let x1: Tensor<f64> = normal_tensor(&mut rng, &[2, 5, 5]);
        let x2: Tensor<f64> = normal_tensor(&mut rng, &[2, 5, 5]);
        let (d, g1, g2) = m.t_difference_vjp(&x1, &x2).unwrap();
        let d_ref = m.t_map(&x1).unwrap().sub(&m.t_map(&x2).unwrap()).unwrap();
        assert!(d.sub(&d_ref).unwrap().max_abs() < 1e-12);
        assert!(g1.sub(&m.t_vjp(&x1, &d_ref).unwrap()).unwrap().max_abs() < 1e-10);
        assert!(g2.sub(&m.t_vjp(&x2, &d_ref).unwrap()).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn ascent_bracketed_by_sampling_and_jacobian_norm() {
        // ReLU scores jump across activation boundaries, so only a smooth
        // activation has a finite Jacobian bound to compare against.
        let elu = NetworkSpec {
            activation: Activation::Elu,
            ..spec(2, 4)
        };
        let m = random_model_with(elu, 11);
        let shape = [2, 8, 8];
        let center: Tensor<f64> = normal_tensor(&mut seeded(11, 0), &shape);
        let delta = 0.5;
        let probe = local_lipschitz(&m, &center, delta, 60, delta / 10.0, 3).unwrap();

        let mut rng = seeded(11, 1);
        let mut sampled = 0.0f64;
        for _ in 0..10_000 {
            let a = uniform_in_ball(&mut rng, &center, delta);
            let b = uniform_in_ball(&mut rng, &center, delta);
            let r = m.t_map(&a).unwrap().sub(&m.t_map(&b).unwrap()).unwrap().norm() / a.sub(&b).unwrap().norm();
            sampled = sampled.max(r);
        }
        assert!(probe.ratio >= sampled, "ascent {} < sampled {}", probe.ratio, sampled);

        let dim = 128;
        let mut jac_max = 0.0f64;
        for _ in 0..100 {
            let p = uniform_in_ball(&mut rng, &center, delta);
            let mut rows = Vec::with_capacity(dim * dim);
            for k in 0..dim {
                let e = Tensor::from_fn(&shape, |i| if i == k { 1.0 } else { 0.0 });
                rows.extend_from_slice(m.t_vjp(&p, &e).unwrap().data());
            }
            let jt = nalgebra::DMatrix::from_row_slice(dim, dim, &rows);
            jac_max = jac_max.max(jt.singular_values().max());
        }
        assert!(probe.ratio <= jac_max * 1.05, "ascent {} > Jacobian bound {}", probe.ratio, jac_max);
    }

    #[test]
    fn ascent_on_linear_map_approaches_spectral_norm() {
        // T = I − M with M = I − diag(t), so ‖T‖ = max |t_i|
        let shape = [2, 2, 2];
        let t = [0.3, -0.2, 0.9, 0.1, 0.5, -0.4, 0.2, 0.6];
        let mut mat = vec![0.0; 64];
        for i in 0..8 {
            mat[i * 8 + i] = 1.0 - t[i];
        }
        let q = QuadraticField::new(&shape, mat).unwrap();
        let c: Tensor<f64> = normal_tensor(&mut seeded(12, 0), &shape);
        let p = local_lipschitz(&q, &c, 0.2, 300, 0.02, 4).unwrap();
        assert!((p.ratio - 0.9).abs() < 0.9 * 0.02, "ratio {}", p.ratio);
        for x in [&p.x1, &p.x2] {
            assert!(x.sub(&c).unwrap().norm() <= 0.2 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64 + 1.0)];
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = vec![p[0].scale(2.0)];
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p[0].max_abs() < 1e-2);
    }

    fn tiny_images(count: usize, seed: u64) -> Vec<Tensor<f64>> {
        (0..count)
            .map(|i| crate::mri::make_phantom(seed + i as u64, 16, 16).unwrap())
            .collect()
    }

    #[test]
    fn pure_dsm_training_halves_the_loss() {
        let model = EnergyModel::<f64>::init(spec(3, 4), 0.1, Init::FanInUniform, 1).unwrap();
        let images = tiny_images(1, 40);
        let mut rng = seeded(99, 0);
        let sig: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..0.1)).collect();
        let zs: Vec<Tensor<f64>> = (0..8).map(|_| normal_tensor(&mut rng, &[2, 16, 16])).collect();
        let batch = vec![images[0].clone(); 8];
        let before = dsm_loss(&model, &batch, &sig, &zs).unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            delta: Some(0.5),
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-3,
            heldout_pairs: 0,
            ..TrainConfig::default()
        };
        let out = train(model, &images, &[], &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.history.len(), 200);
        assert_eq!(out.history.last().unwrap().step, 200);
        let after = dsm_loss(&out.model, &batch, &sig, &zs).unwrap();
        assert!(after <= 0.5 * before, "loss {before} -> {after}");
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let images = tiny_images(3, 50);
        let cfg = TrainConfig {
            delta: Some(0.5),
            epochs: 2,
            batch_size: 2,
            ascent_steps: 3,
            learning_rate: 1e-3,
            heldout_pairs: 4,
            seed: 17,
            ..TrainConfig::default()
        };
        let run = || {
            let model = EnergyModel::<f64>::init(
                spec(3, 4),
                0.1,
                Init::ScaledIdentity { t_gain: 0.5, jitter: 0.1 },
                2,
            )
            .unwrap();
            train(model, &images, &images[..1], &cfg, |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn large_lambda_enforces_the_constraint() {
        // σ_f = 1 and fan-in init start far above the target ratio
        let images = tiny_images(4, 60);
        let elu = NetworkSpec {
            activation: Activation::Elu,
            ..spec(3, 4)
        };
        let model = EnergyModel::<f64>::init(elu, 1.0, Init::FanInUniform, 3).unwrap();
        let delta = 0.3;
        let cfg = TrainConfig {
            lambda: 1e4,
            delta: Some(delta),
            epochs: 150,
            batch_size: 4,
            ascent_steps: 8,
            learning_rate: 3e-3,
            heldout_pairs: 0,
            fresh_restarts: true,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(model, &images, &[], &cfg, |_, _| Ok(())).unwrap();
        let heldout = tiny_images(3, 90);
        for (k, c) in heldout.iter().enumerate() {
            let p = local_lipschitz(&out.model, c, delta, 40, delta / 10.0, k as u64).unwrap();
            assert!(p.ratio <= cfg.l() + 0.05, "held-out ratio {}", p.ratio);
        }
    }

    #[test]
    fn non_finite_training_aborts() {
        let images = vec![Tensor::<f64>::full(&[2, 4, 4], f64::NAN)];
        let model = EnergyModel::<f64>::init(spec(2, 4), 1.0, Init::FanInUniform, 1).unwrap();
        let cfg = TrainConfig {
            lambda: 0.0,
            delta: Some(0.1),
            epochs: 1,
            heldout_pairs: 0,
            ..TrainConfig::default()
        };
        match train(model, &images, &[], &cfg, |_, _| Ok(())) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("epoch 0")),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }
}
