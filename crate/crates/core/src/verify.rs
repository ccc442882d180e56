//! Sampling probes for local convexity, uniqueness, convergence and
//! robustness, plus PSNR and SSIM on magnitude images.

use serde::{Deserialize, Serialize};

use crate::energy::ScoreField;
use crate::error::{Error, Result};
use crate::mri::ForwardOperator;
use crate::par;
use crate::rng::{seeded, stream_id, uniform_in_ball, unit_direction};
use crate::scalar::Real;
use crate::solver::{solve, SolverConfig};
use crate::tensor::Tensor;

/// Value reported when a reconstruction matches its reference exactly.
pub const PSNR_CAP: f64 = 99.0;

const STREAM_PAIRS: u32 = 10;

/// Draws the `k`-th non-degenerate pair in the ball around `centers[c]`.
fn pair_sampler<T: Real>(
    center: &Tensor<T>,
    delta: f64,
    n_pairs: usize,
    seed: u64,
    c: usize,
) -> Vec<(Tensor<T>, Tensor<T>)> {
    let mut rng = seeded(seed, stream_id(STREAM_PAIRS, c as u64));
    let radius = T::of_f64(delta);
    let floor = 1e-9 * delta;
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let x = uniform_in_ball(&mut rng, center, radius);
        let y = uniform_in_ball(&mut rng, center, radius);
        let sep = x.sub(&y).map(|d| d.norm().as_f64()).unwrap_or(0.0);
        if sep > floor {
            pairs.push((x, y));
        }
    }
    pairs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// `min ⟨H(x) − H(y), x − y⟩ / ‖x − y‖²` over all sampled pairs.
    pub m_prime: f64,
    /// Fraction of pairs with a positive quotient.
    pub positive_fraction: f64,
    pub pairs: usize,
}

/// Samples `n_pairs` pairs uniformly in each `B_δ(u)` and measures the
/// local monotonicity modulus of the score.
pub fn probe_monotonicity<T: Real, F: ScoreField<T>>(
    field: &F,
    centers: &[Tensor<T>],
    delta: f64,
    n_pairs: usize,
    seed: u64,
) -> Result<MonotonicityReport> {
    check_probe_args(centers, delta, n_pairs)?;
    let per_ball = par::map_slice(centers, |c, center| -> Result<Vec<f64>> {
        pair_sampler(center, delta, n_pairs, seed, c)
            .iter()
            .map(|(x, y)| {
                let d = x.sub(y)?;
                let dh = field.score(x)?.sub(&field.score(y)?)?;
                Ok(dh.dot(&d)?.as_f64() / d.norm_sq().as_f64())
            })
            .collect()
    });
    let mut m_prime = f64::INFINITY;
    let (mut positive, mut total) = (0usize, 0usize);
    for vals in per_ball {
        for v in vals? {
            m_prime = m_prime.min(v);
            positive += (v > 0.0) as usize;
            total += 1;
        }
    }
    Ok(MonotonicityReport {
        m_prime,
        positive_fraction: positive as f64 / total as f64,
        pairs: total,
    })
}

/// `min E(x) − E(y) − ⟨H(y), x − y⟩ − (m/2)‖x − y‖²` over the same pairs as
/// [`probe_monotonicity`] with the same seed.
pub fn probe_convexity<T: Real, F: ScoreField<T>>(
    field: &F,
    centers: &[Tensor<T>],
    delta: f64,
    n_pairs: usize,
    m: f64,
    seed: u64,
) -> Result<f64> {
    check_probe_args(centers, delta, n_pairs)?;
    let per_ball = par::map_slice(centers, |c, center| -> Result<f64> {
        let mut worst = f64::INFINITY;
        for (x, y) in pair_sampler(center, delta, n_pairs, seed, c) {
            let d = x.sub(&y)?;
            let ex = field.energy(&x)?.as_f64();
            let (ey, hy) = field.energy_and_score(&y)?;
            let slack = ex - ey.as_f64() - hy.dot(&d)?.as_f64() - 0.5 * m * d.norm_sq().as_f64();
            worst = worst.min(slack);
        }
        Ok(worst)
    });
    per_ball.into_iter().try_fold(f64::INFINITY, |acc, v| Ok(acc.min(v?)))
}

fn check_probe_args<T: Real>(centers: &[Tensor<T>], delta: f64, n_pairs: usize) -> Result<()> {
    if centers.is_empty() || n_pairs == 0 {
        return Err(Error::InvalidArgument("probes need at least one center and one pair".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("δ must be positive, got {delta}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// `max ‖Δx*‖·m·η²/‖n‖`; at most 1 under the bound `‖n‖/(mη²)`.
    pub amplification: f64,
    /// `max ‖Δx*‖·2m·η²/‖n‖`; at most 1 under the bound `‖n‖/(2mη²)`.
    pub amplification_half: f64,
    pub trials: usize,
    pub skipped: usize,
    pub failed: usize,
    pub noise_norm: f64,
}

/// Perturbs the measurement with random `n`, `‖n‖ = m·δ·η²`, supported on
/// the sampled k-space locations, and compares `x*(b + n)` with `x*(b)`.
///
/// `x_star` is `x*(b)` and is also the warm start of every perturbed solve.
#[allow(clippy::too_many_arguments)]
pub fn probe_robustness<T: Real, F: ScoreField<T>>(
    field: &F,
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    x_star: &Tensor<T>,
    cfg: &SolverConfig,
    m_model: f64,
    m: f64,
    delta: f64,
    n_trials: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    if !(m > 0.0) {
        return Err(Error::Verification(format!(
            "robustness needs a positive modulus, measured m′ = {m}"
        )));
    }
    let eta = cfg.eta;
    let norm = m * delta * eta * eta;
    let mut rng = seeded(seed, 0);
    let mask = op.mask();
    let plane = mask.numel();
    let mut report = RobustnessReport {
        amplification: 0.0,
        amplification_half: 0.0,
        trials: 0,
        skipped: 0,
        failed: 0,
        noise_norm: norm,
    };
    for _ in 0..n_trials {
        let dir: Tensor<T> = unit_direction(&mut rng, b.shape());
        let masked = Tensor::from_fn(b.shape(), |i| dir.data()[i] * mask.data()[i % plane]);
        let mn = masked.norm().as_f64();
        if mn == 0.0 || norm == 0.0 {
            report.skipped += 1;
            continue;
        }
        let n = masked.scale(T::of_f64(norm / mn));
        let nn = n.norm().as_f64();
        match solve(field, op, &b.add(&n)?, x_star, cfg, m_model) {
            Ok((x, _)) => {
                let dx = x.sub(x_star)?.norm().as_f64();
                let amp = dx * m * eta * eta / nn;
                report.amplification = report.amplification.max(amp);
                report.amplification_half = report.amplification_half.max(2.0 * amp);
                report.trials += 1;
            }
            Err(e) => {
                log::warn!("robustness trial failed: {e}");
                report.failed += 1;
            }
        }
    }
    Ok(report)
}

/// Pixel magnitudes of a `[2, H, W]` complex image.
pub fn magnitude<T: Real>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (c, h, w) = x.dims3("magnitude")?;
    if c != 2 {
        return Err(Error::shape("magnitude", format!("expected [2, H, W], got {:?}", x.shape())));
    }
    let n = h * w;
    let d = x.data();
    Ok((0..n).map(|j| d[j].as_f64().hypot(d[n + j].as_f64())).collect())
}

/// `20·log10(peak / rmse)` on magnitude images, peak from the reference.
pub fn psnr<T: Real>(reference: &Tensor<T>, rec: &Tensor<T>) -> Result<f64> {
    reference.check_same_shape(rec, "psnr")?;
    let a = magnitude(reference)?;
    let b = magnitude(rec)?;
    let peak = a.iter().cloned().fold(0.0, f64::max);
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM over valid 7×7 Gaussian windows (σ = 1.5) of the
/// magnitude images, with `K1 = 0.01`, `K2 = 0.03` and the reference peak
/// as data range.
pub fn ssim<T: Real>(reference: &Tensor<T>, rec: &Tensor<T>) -> Result<f64> {
    reference.check_same_shape(rec, "ssim")?;
    let (_, h, w) = reference.dims3("ssim")?;
    const WIN: usize = 7;
    if h < WIN || w < WIN {
        return Err(Error::shape("ssim", format!("image {h}x{w} is smaller than the 7x7 window")));
    }
    let a = magnitude(reference)?;
    let b = magnitude(rec)?;
    let range = a.iter().cloned().fold(0.0, f64::max);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let win = gaussian_window(WIN, 1.5);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - WIN {
        for x in 0..=w - WIN {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (k, &g) in win.iter().enumerate() {
                let p = (y + k / WIN) * w + x + k % WIN;
                ma += g * a[p];
                mb += g * b[p];
                saa += g * a[p] * a[p];
                sbb += g * b[p] * b[p];
                sab += g * a[p] * b[p];
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += if den > 0.0 { num / den } else { 1.0 };
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtLeast,
    AtMost,
}

/// One verified property: a measured constant against its threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaRecord {
    pub lemma: String,
    pub samples: usize,
    pub measured: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub pass: bool,
}

impl LemmaRecord {
    pub fn new(lemma: &str, samples: usize, measured: f64, threshold: f64, comparison: Comparison) -> Self {
        Self {
            lemma: lemma.to_string(),
            samples,
            measured,
            threshold,
            comparison,
            pass: Self::decide(measured, threshold, comparison),
        }
    }

    fn decide(measured: f64, threshold: f64, comparison: Comparison) -> bool {
        match comparison {
            Comparison::AtLeast => measured >= threshold,
            Comparison::AtMost => measured <= threshold,
        }
    }

    pub fn consistent(&self) -> bool {
        self.pass == Self::decide(self.measured, self.threshold, self.comparison)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub delta: f64,
    pub m: f64,
    pub model_hash: String,
    pub records: Vec<LemmaRecord>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }

    pub fn record(&self, lemma: &str) -> Option<&LemmaRecord> {
        self.records.iter().find(|r| r.lemma == lemma)
    }

    /// Recomputes every pass flag from its measured constant and threshold.
    pub fn check_integrity(&self) -> Result<()> {
        for r in &self.records {
            if !r.consistent() {
                return Err(Error::Integrity(format!(
                    "`{}` claims pass = {} but measured {} vs threshold {} ({:?})",
                    r.lemma, r.pass, r.measured, r.threshold, r.comparison
                )));
            }
        }
        Ok(())
    }
}

/// Measurement probes for [`verify_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub balls: usize,
    pub pairs: usize,
    pub lipschitz_steps: usize,
    pub uniqueness_inits: usize,
    pub uniqueness_tolerance: f64,
    /// Fraction of cases that must pass the uniqueness probe.
    pub uniqueness_rate: f64,
    pub robustness_trials: usize,
    pub robustness_tolerance: f64,
    pub descent_slack: f64,
    pub stationarity_tolerance: f64,
    /// Slack added to `l` for the held-out Lipschitz check.
    pub lipschitz_slack: f64,
    /// Slack subtracted from `m` for the monotonicity check.
    pub monotonicity_slack: f64,
    pub convexity_slack: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            balls: 20,
            pairs: 1000,
            lipschitz_steps: 30,
            uniqueness_inits: 5,
            uniqueness_tolerance: 1e-3,
            uniqueness_rate: 0.95,
            robustness_trials: 5,
            robustness_tolerance: 1.05,
            descent_slack: 1e-8,
            stationarity_tolerance: 1e-3,
            lipschitz_slack: 0.05,
            monotonicity_slack: 0.05,
            convexity_slack: 1e-6,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.balls == 0 || self.pairs == 0 || self.uniqueness_inits == 0 || self.robustness_trials == 0 {
            return Err(Error::Config("verify sample counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uniqueness_rate) {
            return Err(Error::Config(format!(
                "verify.uniqueness_rate must lie in [0, 1], got {}",
                self.uniqueness_rate
            )));
        }
        Ok(())
    }
}

/// A reconstruction case with its solver trace, as used by [`verify_model`].
pub struct SolvedCase<'a, T: Real> {
    pub op: &'a ForwardOperator<T>,
    pub measurement: &'a Tensor<T>,
    pub x_star: &'a Tensor<T>,
    pub objective: &'a [f64],
    pub stationarity: &'a [f64],
}

/// Runs every probe and assembles the report.
///
/// `centers` are held-out clean images; `cases` are finished solves.
#[allow(clippy::too_many_arguments)]
pub fn verify_model<T: Real, F: ScoreField<T>>(
    field: &F,
    centers: &[Tensor<T>],
    cases: &[SolvedCase<'_, T>],
    delta: f64,
    m: f64,
    solver: &SolverConfig,
    cfg: &VerifyConfig,
    seed: u64,
    model_hash: &str,
) -> Result<VerificationReport> {
    cfg.validate()?;
    let balls: Vec<Tensor<T>> = centers.iter().take(cfg.balls).cloned().collect();
    let mut records = Vec::new();

    let mono = probe_monotonicity(field, &balls, delta, cfg.pairs, seed)?;
    records.push(LemmaRecord::new(
        "local_monotonicity",
        mono.pairs,
        mono.m_prime,
        m - cfg.monotonicity_slack,
        Comparison::AtLeast,
    ));
    let conv_modulus = mono.m_prime.max(0.0);
    let slack = probe_convexity(field, &balls, delta, cfg.pairs, conv_modulus, seed)?;
    records.push(LemmaRecord::new(
        "local_convexity",
        mono.pairs,
        slack,
        -cfg.convexity_slack,
        Comparison::AtLeast,
    ));

    let ratios = par::map_slice(&balls, |k, c| {
        crate::training::local_lipschitz(
            field,
            c,
            delta,
            cfg.lipschitz_steps,
            delta / 10.0,
            seed ^ stream_id(STREAM_PAIRS + 1, k as u64),
        )
        .map(|p| p.ratio)
    });
    let mut max_ratio = 0.0f64;
    for r in ratios {
        max_ratio = max_ratio.max(r?);
    }
    records.push(LemmaRecord::new(
        "residual_lipschitz",
        balls.len(),
        max_ratio,
        1.0 - m + cfg.lipschitz_slack,
        Comparison::AtMost,
    ));

    if !cases.is_empty() {
        let rise = cases
            .iter()
            .flat_map(|c| c.objective.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::NEG_INFINITY, f64::max);
        records.push(LemmaRecord::new(
            "descent",
            cases.len(),
            rise.max(0.0),
            cfg.descent_slack,
            Comparison::AtMost,
        ));
        let worst_stationarity = cases
            .iter()
            .map(|c| c.stationarity.iter().cloned().fold(f64::INFINITY, f64::min))
            .fold(0.0f64, f64::max);
        records.push(LemmaRecord::new(
            "stationarity",
            cases.len(),
            worst_stationarity,
            cfg.stationarity_tolerance,
            Comparison::AtMost,
        ));

        let unique = par::map_slice(cases, |k, c| {
            crate::solver::uniqueness_probe(
                field,
                c.op,
                c.measurement,
                c.x_star,
                delta,
                cfg.uniqueness_inits,
                cfg.uniqueness_tolerance,
                solver,
                m,
                seed ^ stream_id(STREAM_PAIRS + 2, k as u64),
            )
        });
        let mut agree = 0usize;
        for u in unique {
            agree += u?.agree as usize;
        }
        records.push(LemmaRecord::new(
            "uniqueness",
            cases.len(),
            agree as f64 / cases.len() as f64,
            cfg.uniqueness_rate,
            Comparison::AtLeast,
        ));

        let robust = par::map_slice(cases, |k, c| {
            probe_robustness(
                field,
                c.op,
                c.measurement,
                c.x_star,
                solver,
                m,
                mono.m_prime,
                delta,
                cfg.robustness_trials,
                seed ^ stream_id(STREAM_PAIRS + 3, k as u64),
            )
        });
        let (mut amp, mut amp_half, mut trials, mut failed) = (0.0f64, 0.0f64, 0usize, 0usize);
        let mut robust_error = None;
        for r in robust {
            match r {
                Ok(r) => {
                    amp = amp.max(r.amplification);
                    amp_half = amp_half.max(r.amplification_half);
                    trials += r.trials;
                    failed += r.failed;
                }
                Err(e) => robust_error = Some(e),
            }
        }
        if let Some(e) = robust_error {
            log::warn!("robustness probe not run: {e}");
            amp = f64::INFINITY;
            amp_half = f64::INFINITY;
        }
        if failed > 0 {
            amp = f64::INFINITY;
            amp_half = f64::INFINITY;
        }
        records.push(LemmaRecord::new(
            "robustness",
            trials,
            amp,
            cfg.robustness_tolerance,
            Comparison::AtMost,
        ));
        records.push(LemmaRecord::new(
            "robustness_half_bound",
            trials,
            amp_half,
            cfg.robustness_tolerance,
            Comparison::AtMost,
        ));
    }

    Ok(VerificationReport {
        seed,
        delta,
        m,
        model_hash: model_hash.to_string(),
        records,
    })
}
