//! Learned energy priors with local convexity constraints for MAP image
//! reconstruction.
//!
//! The crate contains a small tensor library with a reverse-mode
//! autodiff engine that supports second derivatives, the energy model
//! and its training loop, a Cartesian multi-coil MRI forward model, the
//! majorization-minimization MAP solver, and the empirical probes used to
//! certify local convexity, uniqueness, convergence and robustness.

pub mod autodiff;
pub mod dataset;
pub mod energy;
pub mod experiment;
pub mod error;
pub mod fft;
pub mod lcmt;
pub mod linalg;
pub mod mri;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod solver;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{grad, GradMode, Grads, Var};
pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::{conv2d, dot_re, relu, Tensor};
