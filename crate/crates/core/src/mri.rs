//! Cartesian multi-coil forward model `A = S F C`, SENSE initialization,
//! undersampling masks, synthetic coil maps and phantoms.
//!
//! k-space tensors use the unshifted DFT layout: the DC sample sits at
//! index `[0, 0]` and low frequencies wrap around the array edges.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{from_complex, to_complex, Fft2};
use crate::linalg::conjugate_gradient;
use crate::rng::{normal_tensor, seeded};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rustfft::num_complex::Complex;

/// `y_c = M ⊙ F(C_c ⊙ x)` for every coil `c`.
#[derive(Clone, Debug)]
pub struct ForwardOperator<T: Real> {
    mask: Tensor<T>,
    coils: Tensor<T>,
    fft: Fft2<T>,
}

impl<T: Real> ForwardOperator<T> {
    /// `mask` is `[H, W]` with entries in {0, 1}; `coils` is `[N_c, 2, H, W]`.
    pub fn new(mask: Tensor<T>, coils: Tensor<T>) -> Result<Self> {
        let (h, w) = match mask.shape() {
            &[h, w] => (h, w),
            s => return Err(Error::shape("ForwardOperator", format!("mask must be [H, W], got {s:?}"))),
        };
        match coils.shape() {
            &[_, 2, ch, cw] if (ch, cw) == (h, w) => {}
            s => {
                return Err(Error::shape(
                    "ForwardOperator",
                    format!("coil maps must be [N_c, 2, {h}, {w}], got {s:?}"),
                ))
            }
        }
        if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::InvalidArgument("mask must be binary".into()));
        }
        Ok(Self {
            mask,
            coils,
            fft: Fft2::new(h, w),
        })
    }

    /// Single coil with unit sensitivity.
    pub fn single_coil(mask: Tensor<T>) -> Result<Self> {
        let (h, w) = (mask.shape()[0], mask.shape().get(1).copied().unwrap_or(1));
        let coils = Tensor::from_fn(&[1, 2, h, w], |i| if i < h * w { T::one() } else { T::zero() });
        Self::new(mask, coils)
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn coils(&self) -> &Tensor<T> {
        &self.coils
    }

    pub fn n_coils(&self) -> usize {
        self.coils.shape()[0]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let (h, w) = self.fft.dims();
        [2, h, w]
    }

    pub fn measurement_shape(&self) -> [usize; 4] {
        let (h, w) = self.fft.dims();
        [self.n_coils(), 2, h, w]
    }

    fn coil(&self, c: usize) -> Vec<Complex<T>> {
        let n = self.fft.dims().0 * self.fft.dims().1;
        to_complex(&self.coils.data()[c * 2 * n..(c + 1) * 2 * n])
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != self.image_shape() {
            return Err(Error::shape(
                "apply",
                format!("expected image {:?}, got {:?}", self.image_shape(), x.shape()),
            ));
        }
        let (h, w) = self.fft.dims();
        let n = h * w;
        let img = to_complex(x.data());
        let mask = self.mask.data();
        let mut out = Vec::with_capacity(self.n_coils() * 2 * n);
        for c in 0..self.n_coils() {
            let sens = self.coil(c);
            let mut buf: Vec<Complex<T>> = img.iter().zip(&sens).map(|(a, s)| a * s).collect();
            self.fft.transform(&mut buf, false);
            for (v, &m) in buf.iter_mut().zip(mask) {
                *v = *v * m;
            }
            out.extend(from_complex(&buf, h, w).into_vec());
        }
        Tensor::new(&self.measurement_shape(), out)
    }

    pub fn adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        if y.shape() != self.measurement_shape() {
            return Err(Error::shape(
                "adjoint",
                format!("expected measurement {:?}, got {:?}", self.measurement_shape(), y.shape()),
            ));
        }
        let (h, w) = self.fft.dims();
        let n = h * w;
        let mask = self.mask.data();
        let mut acc = vec![Complex::new(T::zero(), T::zero()); n];
        for c in 0..self.n_coils() {
            let mut buf = to_complex(&y.data()[c * 2 * n..(c + 1) * 2 * n]);
            for (v, &m) in buf.iter_mut().zip(mask) {
                *v = *v * m;
            }
            self.fft.transform(&mut buf, true);
            for ((a, v), s) in acc.iter_mut().zip(&buf).zip(self.coil(c)) {
                *a = *a + s.conj() * v;
            }
        }
        Ok(from_complex(&acc, h, w))
    }

    /// `A^H A x`.
    pub fn normal(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.adjoint(&self.apply(x)?)
    }

    /// Fraction of k-space locations sampled.
    pub fn sampling_fraction(&self) -> f64 {
        self.mask.sum().as_f64() / self.mask.numel() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::OneD => "1d",
            MaskKind::TwoD => "2d",
        })
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1d" => Ok(MaskKind::OneD),
            "2d" => Ok(MaskKind::TwoD),
            other => Err(Error::Config(format!("unknown mask kind `{other}`"))),
        }
    }
}

/// Low-frequency indices around DC in the unshifted layout.
fn centre_indices(len: usize, count: usize) -> Vec<usize> {
    let lo = count / 2;
    (0..count)
        .map(|k| (k as isize - lo as isize).rem_euclid(len as isize) as usize)
        .collect()
}

/// Cartesian undersampling mask with a fully sampled low-frequency centre.
///
/// 1D masks sample whole phase-encode columns; 2D masks sample individual
/// points. The number of sampled columns (points) is `round(total / R)`,
/// so the realized acceleration is within rounding of `R`.
pub fn make_mask<T: Real>(
    kind: MaskKind,
    accel: f64,
    center_fraction: f64,
    seed: u64,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if !(accel >= 1.0) {
        return Err(Error::InvalidArgument(format!("acceleration must be ≥ 1, got {accel}")));
    }
    if !(0.0..=1.0).contains(&center_fraction) {
        return Err(Error::InvalidArgument(format!(
            "center fraction must lie in [0, 1], got {center_fraction}"
        )));
    }
    let mut rng = seeded(seed, 0);
    let mut mask = vec![T::zero(); h * w];
    match kind {
        MaskKind::OneD => {
            let target = (w as f64 / accel).round() as usize;
            let centre = centre_indices(w, (center_fraction * w as f64).round() as usize);
            if centre.len() > target {
                return Err(Error::InvalidArgument(format!(
                    "{} centre columns exceed the budget of {target} at R = {accel}",
                    centre.len()
                )));
            }
            let mut chosen = vec![false; w];
            centre.iter().for_each(|&c| chosen[c] = true);
            let mut rest: Vec<usize> = (0..w).filter(|&c| !chosen[c]).collect();
            rest.shuffle(&mut rng);
            rest.iter().take(target - centre.len()).for_each(|&c| chosen[c] = true);
            for y in 0..h {
                for x in 0..w {
                    if chosen[x] {
                        mask[y * w + x] = T::one();
                    }
                }
            }
        }
        MaskKind::TwoD => {
            let target = ((h * w) as f64 / accel).round() as usize;
            let cy = centre_indices(h, (center_fraction * h as f64).round() as usize);
            let cx = centre_indices(w, (center_fraction * w as f64).round() as usize);
            if cy.len() * cx.len() > target {
                return Err(Error::InvalidArgument(format!(
                    "{} centre points exceed the budget of {target} at R = {accel}",
                    cy.len() * cx.len()
                )));
            }
            let mut chosen = vec![false; h * w];
            for &y in &cy {
                for &x in &cx {
                    chosen[y * w + x] = true;
                }
            }
            let mut rest: Vec<usize> = (0..h * w).filter(|&p| !chosen[p]).collect();
            rest.shuffle(&mut rng);
            let already = chosen.iter().filter(|&&c| c).count();
            rest.iter().take(target - already).for_each(|&p| chosen[p] = true);
            for (m, c) in mask.iter_mut().zip(chosen) {
                if c {
                    *m = T::one();
                }
            }
        }
    }
    Tensor::new(&[h, w], mask)
}

/// Smooth complex coil sensitivities, normalized so that
/// `Σ_c |C_c(p)|² = 1` at every pixel.
///
/// Coil `c` is a Gaussian bump centred outside the image at angle
/// `2πc/N_c` with a gentle linear phase ramp.
pub fn synthetic_coil_maps<T: Real>(n_coils: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if n_coils == 0 {
        return Err(Error::InvalidArgument("need at least one coil".into()));
    }
    let n = h * w;
    let mut maps = vec![Complex::new(0.0f64, 0.0); n_coils * n];
    let width = 0.7;
    for c in 0..n_coils {
        let ang = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
        let (cy, cx) = (0.75 * ang.sin(), 0.75 * ang.cos());
        for y in 0..h {
            for x in 0..w {
                let py = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
                let px = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
                let d2 = (py - cy).powi(2) + (px - cx).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = 0.5 * (px * ang.cos() + py * ang.sin()) + ang;
                maps[c * n + y * w + x] = Complex::from_polar(mag, phase);
            }
        }
    }
    for p in 0..n {
        let ss: f64 = (0..n_coils).map(|c| maps[c * n + p].norm_sqr()).sum::<f64>().sqrt();
        for c in 0..n_coils {
            maps[c * n + p] /= ss;
        }
    }
    let mut data = Vec::with_capacity(n_coils * 2 * n);
    for c in 0..n_coils {
        data.extend(maps[c * n..(c + 1) * n].iter().map(|v| T::of_f64(v.re)));
        data.extend(maps[c * n..(c + 1) * n].iter().map(|v| T::of_f64(v.im)));
    }
    Tensor::new(&[n_coils, 2, h, w], data)
}

/// Random piecewise-smooth complex phantom, max magnitude 1.
///
/// A large body ellipse plus 2–7 smaller overlapping ellipses, each with
/// an intensity drawn from `[0.2, 1.0]`, a gentle multiplicative shading,
/// and a smooth phase field.
pub fn make_phantom<T: Real>(seed: u64, h: usize, w: usize) -> Result<Tensor<T>> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("phantom needs H, W ≥ 16, got {h}x{w}")));
    }
    let mut rng = seeded(seed, 0);
    let n_ellipses = rng.gen_range(3..=8);
    let mut mag = vec![0.0f64; h * w];
    for e in 0..n_ellipses {
        let (cy, cx, ay, ax) = if e == 0 {
            (
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(0.7..0.88),
                rng.gen_range(0.6..0.8),
            )
        } else {
            (
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.45..0.45),
                rng.gen_range(0.08..0.35),
                rng.gen_range(0.08..0.35),
            )
        };
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let intensity: f64 = rng.gen_range(0.2..=1.0);
        let (s, c) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let py = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0 - cy;
                let px = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0 - cx;
                let u = c * px + s * py;
                let v = -s * px + c * py;
                if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                    mag[y * w + x] = intensity;
                }
            }
        }
    }
    let (fy, fx, ph) = (
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.5..1.5),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let (py0, px0, p0) = (
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    );
    let n = h * w;
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let py = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
            let px = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let shade = 1.0 + 0.1 * (fy * py * 3.0 + fx * px * 2.0 + ph).sin();
            let phase = p0 + 0.6 * (py0 * py + px0 * px);
            let m = mag[y * w + x] * shade;
            re[y * w + x] = m * phase.cos();
            im[y * w + x] = m * phase.sin();
        }
    }
    let peak = re
        .iter()
        .zip(&im)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max);
    let data = re
        .iter()
        .chain(&im)
        .map(|v| T::of_f64(v / peak))
        .collect();
    Tensor::new(&[2, h, w], data)
}

/// `b = A x + n` with i.i.d. Gaussian noise of standard deviation `eta`
/// on the real and imaginary part of every sampled location.
pub fn simulate_measurement<T: Real>(
    op: &ForwardOperator<T>,
    x: &Tensor<T>,
    eta: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    let clean = op.apply(x)?;
    if eta == 0.0 {
        return Ok(clean);
    }
    let noise: Tensor<T> = normal_tensor(&mut seeded(seed, 0), clean.shape());
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mask = op.mask().data();
    let mut out = clean;
    for (i, (v, z)) in out.data_mut().iter_mut().zip(noise.data()).enumerate() {
        *v = *v + T::of_f64(eta) * *z * mask[i % (h * w)];
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SenseConfig {
    pub lambda: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for SenseConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            cg_tol: 1e-8,
            cg_max_iter: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SenseOutcome<T: Real> {
    pub x: Tensor<T>,
    pub iterations: usize,
    pub relative_residual: f64,
    /// False when CG hit its iteration cap; `x` is then the best iterate.
    pub converged: bool,
}

/// SENSE reconstruction `(A^H A + λ̃ I)^{-1} A^H b` by conjugate gradient.
pub fn sense_init<T: Real>(
    op: &ForwardOperator<T>,
    b: &Tensor<T>,
    cfg: &SenseConfig,
) -> Result<SenseOutcome<T>> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("λ̃ must be ≥ 0, got {}", cfg.lambda)));
    }
    let rhs = op.adjoint(b)?;
    let lam = T::of_f64(cfg.lambda);
    let out = conjugate_gradient(
        |v| op.normal(v)?.axpy(lam, v),
        &rhs,
        None,
        cfg.cg_tol,
        cfg.cg_max_iter,
    )?;
    Ok(SenseOutcome {
        x: out.x,
        iterations: out.iterations,
        relative_residual: out.relative_residual,
        converged: out.converged,
    })
}

/// One training case for [`delta_from_sense`].
pub struct SenseCase<'a, T: Real> {
    pub op: &'a ForwardOperator<T>,
    pub image: &'a Tensor<T>,
    pub measurement: &'a Tensor<T>,
}

/// Worst-case distance between SENSE reconstructions and their reference
/// images: the ball radius δ.
pub fn delta_from_sense<T: Real>(cases: &[SenseCase<'_, T>], cfg: &SenseConfig) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("delta_from_sense needs at least one image".into()));
    }
    let devs = crate::par::map_slice(cases, |_, c| -> Result<f64> {
        let x0 = sense_init(c.op, c.measurement, cfg)?.x;
        Ok(x0.sub(c.image)?.norm().as_f64())
    });
    let mut delta = 0.0f64;
    for d in devs {
        delta = delta.max(d?);
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{fft2, ifft2};

    fn random_op(seed: u64, coils: usize, h: usize, w: usize, accel: f64) -> ForwardOperator<f64> {
        let mask = make_mask(MaskKind::TwoD, accel, 0.0, seed, h, w).unwrap();
        ForwardOperator::new(mask, synthetic_coil_maps(coils, h, w).unwrap()).unwrap()
    }

    #[test]
    fn full_sampling_single_coil_is_fft() {
        let op = ForwardOperator::single_coil(Tensor::<f64>::ones(&[8, 8])).unwrap();
        let x = normal_tensor(&mut seeded(1, 0), &[2, 8, 8]);
        let y = op.apply(&x).unwrap();
        let f = fft2(&x).unwrap();
        assert!(y.reshape(&[2, 8, 8]).unwrap().sub(&f).unwrap().max_abs() < 1e-14);
        let back = op.adjoint(&y).unwrap();
        assert!(back.sub(&x).unwrap().max_abs() < 1e-12);
        let yy = normal_tensor(&mut seeded(2, 0), &[1, 2, 8, 8]);
        let inv = ifft2(&yy.reshape(&[2, 8, 8]).unwrap()).unwrap();
        assert!(op.adjoint(&yy).unwrap().sub(&inv).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn zero_mask_gives_zero_measurement() {
        let op = ForwardOperator::new(Tensor::<f64>::zeros(&[6, 6]), synthetic_coil_maps(3, 6, 6).unwrap()).unwrap();
        let x = normal_tensor(&mut seeded(3, 0), &[2, 6, 6]);
        assert_eq!(op.apply(&x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn adjoint_identity() {
        let op = random_op(4, 4, 12, 10, 2.5);
        let mut rng = seeded(4, 1);
        for _ in 0..20 {
            let x = normal_tensor::<f64>(&mut rng, &op.image_shape());
            let y = normal_tensor::<f64>(&mut rng, &op.measurement_shape());
            let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn coil_maps_are_normalized() {
        let c: Tensor<f64> = synthetic_coil_maps(4, 16, 16).unwrap();
        let n = 256;
        for p in 0..n {
            let ss: f64 = (0..4)
                .map(|k| c.data()[k * 2 * n + p].powi(2) + c.data()[k * 2 * n + n + p].powi(2))
                .sum();
            assert!((ss - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_norm_at_most_one() {
        let op = random_op(5, 4, 16, 16, 2.0);
        let start = normal_tensor(&mut seeded(5, 0), &op.image_shape());
        let top = crate::linalg::power_iteration(|v| op.normal(v), &start, 300).unwrap();
        assert!(top <= 1.0 + 1e-8, "top eigenvalue {top}");
        let full = ForwardOperator::new(Tensor::<f64>::ones(&[16, 16]), synthetic_coil_maps(4, 16, 16).unwrap()).unwrap();
        let top = crate::linalg::power_iteration(|v| full.normal(v), &start, 50).unwrap();
        assert!((top - 1.0).abs() < 1e-10);
    }

    #[test]
    fn mask_examples() {
        let m: Tensor<f64> = make_mask(MaskKind::OneD, 1.0, 0.08, 1, 16, 16).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));

        let m: Tensor<f64> = make_mask(MaskKind::OneD, 2.0, 0.08, 7, 64, 64).unwrap();
        let cols: Vec<usize> = (0..64).filter(|&x| m.data()[x] == 1.0).collect();
        assert!((31..=33).contains(&cols.len()), "{} columns", cols.len());
        for c in [62, 63, 0, 1, 2] {
            assert!(cols.contains(&c), "centre column {c} missing");
        }
        // whole columns
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(m.data()[y * 64 + x], m.data()[x]);
            }
        }
        let again: Tensor<f64> = make_mask(MaskKind::OneD, 2.0, 0.08, 7, 64, 64).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn mask_acceleration_within_tolerance() {
        for (kind, r) in [(MaskKind::OneD, 2.0), (MaskKind::OneD, 3.0), (MaskKind::TwoD, 4.0), (MaskKind::TwoD, 6.0)] {
            let m: Tensor<f64> = make_mask(kind, r, 0.08, 3, 32, 32).unwrap();
            let realized = m.numel() as f64 / m.sum();
            assert!((realized - r).abs() <= 0.05 * r, "{kind} R={r}: realized {realized}");
        }
    }

    #[test]
    fn infeasible_mask_is_rejected() {
        assert!(make_mask::<f64>(MaskKind::OneD, 8.0, 0.5, 1, 32, 32).is_err());
        assert!(make_mask::<f64>(MaskKind::OneD, 0.5, 0.08, 1, 32, 32).is_err());
    }

    #[test]
    fn phantom_contract() {
        let p: Tensor<f64> = make_phantom(11, 32, 32).unwrap();
        let n = 32 * 32;
        let mag: Vec<f64> = (0..n).map(|j| p.data()[j].hypot(p.data()[n + j])).collect();
        let peak = mag.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);
        assert_eq!(p, make_phantom(11, 32, 32).unwrap());
        assert_ne!(p, make_phantom::<f64>(12, 32, 32).unwrap());
        // corners lie outside every ellipse
        let inside: Vec<f64> = mag.iter().cloned().filter(|&m| m > 0.0).collect();
        let background = [0, 31, n - 32, n - 1].iter().map(|&j| mag[j]).sum::<f64>() / 4.0;
        let inside_mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!(inside_mean > background);
        assert!(make_phantom::<f64>(1, 8, 32).is_err());
    }

    #[test]
    fn sense_full_sampling_recovers_image() {
        let op = ForwardOperator::single_coil(Tensor::<f64>::ones(&[8, 8])).unwrap();
        let x = normal_tensor(&mut seeded(6, 0), &[2, 8, 8]);
        let b = op.apply(&x).unwrap();
        let cfg = SenseConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let out = sense_init(&op, &b, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.x.sub(&x).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn sense_runs_agree() {
        let op = random_op(7, 4, 16, 16, 3.0);
        let x: Tensor<f64> = make_phantom(7, 16, 16).unwrap();
        let b = simulate_measurement(&op, &x, 0.01, 1).unwrap();
        let cfg = SenseConfig::default();
        let a = sense_init(&op, &b, &cfg).unwrap();
        let c = sense_init(&op, &b, &cfg).unwrap();
        assert!(a.converged);
        assert!(a.x.sub(&c.x).unwrap().norm() <= cfg.cg_tol * a.x.norm());
    }

    #[test]
    fn delta_examples() {
        let op = ForwardOperator::single_coil(Tensor::<f64>::ones(&[16, 16])).unwrap();
        let x: Tensor<f64> = make_phantom(1, 16, 16).unwrap();
        let b = op.apply(&x).unwrap();
        let cfg = SenseConfig {
            lambda: 0.0,
            cg_tol: 1e-12,
            cg_max_iter: 50,
        };
        let d = delta_from_sense(&[SenseCase { op: &op, image: &x, measurement: &b }], &cfg).unwrap();
        assert!(d < 1e-10);
        assert!(delta_from_sense::<f64>(&[], &cfg).is_err());
    }

    #[test]
    fn noise_only_on_sampled_locations() {
        let op = random_op(8, 2, 8, 8, 2.0);
        let x = Tensor::<f64>::zeros(&[2, 8, 8]);
        let b = simulate_measurement(&op, &x, 0.1, 3).unwrap();
        let m = op.mask().data();
        for (i, v) in b.data().iter().enumerate() {
            if m[i % 64] == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(b.norm() > 0.0);
    }
}
