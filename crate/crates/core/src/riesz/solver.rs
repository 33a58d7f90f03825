//! Damped Newton descent for smooth convex objectives.
//!
//! Fixed start, full-batch steps, Armijo backtracking with halving. The
//! iteration is deterministic: the same objective always yields the same
//! iterates.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

const ARMIJO: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MAX_HALVINGS: usize = 80;

pub trait ConvexObjective {
    fn dim(&self) -> usize;

    /// Objective value; `+∞` outside the domain.
    fn value(&self, beta: &DVector<f64>) -> f64;

    fn gradient_hessian(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn newton_direction(grad: &DVector<f64>, hess: DMatrix<f64>) -> DVector<f64> {
    let scale = 1.0 + hess.diagonal().amax();
    let mut jitter = 0.0;
    loop {
        let mut h = hess.clone();
        if jitter > 0.0 {
            for k in 0..h.nrows() {
                h[(k, k)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(h) {
            return -chol.solve(grad);
        }
        jitter = if jitter == 0.0 {
            1e-12 * scale
        } else {
            jitter * 10.0
        };
        if jitter > 1e6 * scale {
            // plain gradient step as last resort
            return -grad / scale;
        }
    }
}

/// Minimizes `objective` from `start` until `‖∇‖∞ ≤ tol` and the Newton
/// step is below `sqrt(tol)` relative to `β`.
pub fn minimize<O: ConvexObjective>(
    objective: &O,
    start: DVector<f64>,
    options: SolverOptions,
) -> Result<SolverTrace> {
    let mut beta = start;
    let mut value = objective.value(&beta);
    if !value.is_finite() {
        return Err(Error::InvalidInput(
            "solver started outside the objective's domain".into(),
        ));
    }
    let (mut grad, mut hess) = objective.gradient_hessian(&beta);
    for iteration in 0..options.max_iter {
        let grad_norm = grad.amax();
        let direction = newton_direction(&grad, hess);
        // A small gradient alone is not enough: along a recession direction
        // the gradient vanishes while the Newton step stays long.
        let small_grad = grad_norm <= options.tol;
        if small_grad && direction.amax() <= options.tol.sqrt() * (1.0 + beta.amax()) {
            return Ok(SolverTrace {
                beta,
                iterations: iteration,
                grad_norm,
            });
        }
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &beta + &direction * step;
            let cand_value = objective.value(&candidate);
            if cand_value.is_finite() {
                if cand_value <= value + ARMIJO * step * slope {
                    accepted = Some((candidate, cand_value));
                    break;
                }
                // Near the optimum the predicted decrease drops below the
                // resolution of the objective; fall back on the gradient.
                if (cand_value - value).abs() <= 1e-13 * (1.0 + value.abs()) {
                    let (g, _) = objective.gradient_hessian(&candidate);
                    if g.amax() < grad_norm {
                        accepted = Some((candidate, cand_value));
                        break;
                    }
                }
            }
            step *= SHRINK;
        }
        let Some((next, next_value)) = accepted else {
            if small_grad {
                return Ok(SolverTrace {
                    beta,
                    iterations: iteration,
                    grad_norm,
                });
            }
            return Err(Error::NotConverged {
                iterations: iteration,
                grad_norm,
            });
        };
        beta = next;
        value = next_value;
        (grad, hess) = objective.gradient_hessian(&beta);
    }
    Err(Error::NotConverged {
        iterations: options.max_iter,
        grad_norm: grad.amax(),
    })
}
