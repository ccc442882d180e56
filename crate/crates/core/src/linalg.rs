//! Matrix-free linear algebra on tensors.

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CgOutcome<T: Real> {
    pub x: Tensor<T>,
    pub iterations: usize,
    /// `‖b − A x‖ / ‖b‖` at the returned iterate.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Conjugate gradient for a symmetric positive (semi)definite operator.
///
/// Stops when `‖r‖ ≤ tol·‖b‖`. On non-convergence the iterate with the
/// smallest residual is returned with `converged == false`.
pub fn conjugate_gradient<T, F>(
    apply: F,
    rhs: &Tensor<T>,
    x0: Option<&Tensor<T>>,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome<T>>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let b_norm = rhs.norm().as_f64();
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: Tensor::zeros(rhs.shape()),
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut x = match x0 {
        Some(x0) => x0.clone(),
        None => Tensor::zeros(rhs.shape()),
    };
    let mut r = rhs.sub(&apply(&x)?)?;
    let mut p = r.clone();
    let mut rr = r.norm_sq();
    let mut best = (rr.as_f64().sqrt() / b_norm, x.clone());
    if best.0 <= tol {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            relative_residual: best.0,
            converged: true,
        });
    }
    for it in 1..=max_iter {
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?;
        if pap <= T::zero() || !pap.is_finite() {
            break;
        }
        let alpha = rr / pap;
        x.add_assign_scaled(alpha, &p)?;
        r.add_assign_scaled(-alpha, &ap)?;
        let rr_new = r.norm_sq();
        let rel = rr_new.as_f64().sqrt() / b_norm;
        if rel < best.0 {
            best = (rel, x.clone());
        }
        if rel <= tol {
            return Ok(CgOutcome {
                x,
                iterations: it,
                relative_residual: rel,
                converged: true,
            });
        }
        let beta = rr_new / rr;
        p = r.axpy(beta, &p)?;
        rr = rr_new;
    }
    log::warn!("conjugate gradient stopped at relative residual {:.3e}", best.0);
    Ok(CgOutcome {
        x: best.1,
        iterations: max_iter,
        relative_residual: best.0,
        converged: false,
    })
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by
/// power iteration.
pub fn power_iteration<T, F>(apply: F, start: &Tensor<T>, iters: usize) -> Result<f64>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut v = start.scale(T::one() / start.norm());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = apply(&v)?;
        lambda = v.dot(&w)?.as_f64();
        let n = w.norm();
        if n == T::zero() {
            return Ok(0.0);
        }
        v = w.scale(T::one() / n);
    }
    Ok(lambda)
}
