//! Unitary 2-D DFT on the `[2, H, W]` real/imag layout.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Planned forward and inverse transforms for one image size.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl<T: Real> Fft2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
            scale: T::of_f64(1.0 / ((h * w) as f64).sqrt()),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// In-place transform of a row-major `H×W` complex buffer.
    pub fn transform(&self, buf: &mut [Complex<T>], inverse: bool) {
        debug_assert_eq!(buf.len(), self.h * self.w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut column = vec![Complex::new(T::zero(), T::zero()); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                column[y] = buf[y * self.w + x];
            }
            col.process(&mut column);
            for y in 0..self.h {
                buf[y * self.w + x] = column[y] * self.scale;
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, false)
    }

    pub fn inverse(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, true)
    }

    fn apply(&self, x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        if x.shape() != [2, self.h, self.w] {
            return Err(Error::shape(
                "fft2",
                format!("expected [2, {}, {}], got {:?}", self.h, self.w, x.shape()),
            ));
        }
        let mut buf = to_complex(x.data());
        self.transform(&mut buf, inverse);
        Ok(from_complex(&buf, self.h, self.w))
    }
}

/// Split layout `[re..., im...]` to interleaved complex values.
pub fn to_complex<T: Real>(data: &[T]) -> Vec<Complex<T>> {
    let n = data.len() / 2;
    data[..n]
        .iter()
        .zip(&data[n..])
        .map(|(&re, &im)| Complex::new(re, im))
        .collect()
}

pub fn from_complex<T: Real>(buf: &[Complex<T>], h: usize, w: usize) -> Tensor<T> {
    let n = buf.len();
    let mut data = vec![T::zero(); 2 * n];
    for (j, c) in buf.iter().enumerate() {
        data[j] = c.re;
        data[n + j] = c.im;
    }
    Tensor::new(&[2, h, w], data).expect("buffer matches dims")
}

fn plan_for<T: Real>(x: &Tensor<T>) -> Result<Fft2<T>> {
    match x.shape() {
        &[2, h, w] => Ok(Fft2::new(h, w)),
        s => Err(Error::shape("fft2", format!("expected [2, H, W], got {s:?}"))),
    }
}

/// Orthonormal 2-D DFT of a `[2, H, W]` complex image.
pub fn fft2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    plan_for(x)?.forward(x)
}

pub fn ifft2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    plan_for(x)?.inverse(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};

    #[test]
    fn delta_maps_to_constant() {
        for (h, w) in [(4, 4), (5, 3), (8, 6)] {
            let mut x = Tensor::<f64>::zeros(&[2, h, w]);
            x.data_mut()[0] = 1.0;
            let y = fft2(&x).unwrap();
            let c = 1.0 / ((h * w) as f64).sqrt();
            for j in 0..h * w {
                assert!((y.data()[j] - c).abs() < 1e-15);
                assert!(y.data()[h * w + j].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = seeded(3, 0);
        for (h, w) in [(8, 8), (7, 12), (32, 32)] {
            let x = normal_tensor::<f64>(&mut rng, &[2, h, w]);
            let y = fft2(&x).unwrap();
            let back = ifft2(&y).unwrap();
            let err = back.sub(&x).unwrap().max_abs();
            assert!(err < 1e-12, "round trip error {err}");
            assert!((y.norm() - x.norm()).abs() < 1e-12 * x.norm());
        }
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = seeded(4, 0);
        let (h, w) = (3, 5);
        let x = normal_tensor::<f64>(&mut rng, &[2, h, w]);
        let y = fft2(&x).unwrap();
        let n = h * w;
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex::new(0.0, 0.0);
                for yy in 0..h {
                    for xx in 0..w {
                        let v = Complex::new(x.data()[yy * w + xx], x.data()[n + yy * w + xx]);
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((ky * yy) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                        acc += v * Complex::from_polar(1.0, ang);
                    }
                }
                acc /= (n as f64).sqrt();
                assert!((y.data()[ky * w + kx] - acc.re).abs() < 1e-12);
                assert!((y.data()[n + ky * w + kx] - acc.im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_complex_layout() {
        assert!(fft2(&Tensor::<f64>::zeros(&[3, 4, 4])).is_err());
    }
}
