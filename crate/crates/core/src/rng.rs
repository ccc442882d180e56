//! Seeded random streams.
//!
//! Every parallel task draws from its own ChaCha stream derived from the
//! master seed and a task index, so results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;
use crate::tensor::Tensor;

pub type TaskRng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> TaskRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream index for a (purpose, item) pair.
pub fn stream_id(purpose: u32, item: u64) -> u64 {
    ((purpose as u64) << 40) ^ item
}

pub fn normal_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of_f64(rng.sample::<f64, _>(StandardNormal)))
}

/// Uniformly random direction on the unit sphere.
pub fn unit_direction<T: Real>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    loop {
        let d: Tensor<T> = normal_tensor(rng, shape);
        let n = d.norm();
        if n > T::zero() {
            return d.scale(T::one() / n);
        }
    }
}

/// Uniform sample from the ball of radius `radius` around `center`.
pub fn uniform_in_ball<T: Real>(rng: &mut impl Rng, center: &Tensor<T>, radius: T) -> Tensor<T> {
    let dir: Tensor<T> = unit_direction(rng, center.shape());
    let dim = center.numel() as f64;
    let r = radius.as_f64() * rng.gen::<f64>().powf(1.0 / dim);
    center
        .axpy(T::of_f64(r), &dir)
        .expect("direction has the center's shape")
}
