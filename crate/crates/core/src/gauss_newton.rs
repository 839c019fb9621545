//! Gauss-Newton minimization of GMM-type quadratic forms `1/2 Psi' V^- Psi`.
//!
//! The weight `V^-` is frozen inside each step and refreshed at the accepted
//! iterate. Steps are halved until the frozen-weight merit does not increase.

use nalgebra::{DMatrix, DVector};

use crate::error::{FusionError, Result};
use crate::linalg::{pinv_sym, solve_spd_damped, sup_norm, PINV_CUTOFF};

/// Moment vector, its covariance and its sensitivity `-dPsi/dtheta` at a point.
#[derive(Debug, Clone)]
pub struct MomentEval {
    pub psi: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sensitivity: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GnOptions {
    /// Tolerance on the sup-norm of `S' V^- Psi`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for GnOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            max_halvings: 40,
        }
    }
}

/// Merit values before and after one accepted step, both under the weight
/// frozen for that step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedStep {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone)]
pub struct GnOutcome {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// `1/2 Psi' V^- Psi` at the returned point with its own weight.
    pub objective: f64,
    /// Evaluation at the returned point.
    pub eval: MomentEval,
    /// Generalized inverse of the covariance at the returned point.
    pub weight: DMatrix<f64>,
    pub steps: Vec<AcceptedStep>,
}

fn quad(psi: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    0.5 * psi.dot(&(w * psi))
}

pub fn minimize<F, G>(
    theta0: DVector<f64>,
    mut full: F,
    mut psi_only: G,
    opts: &GnOptions,
) -> Result<GnOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<MomentEval>,
    G: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut theta = theta0;
    let mut steps = Vec::new();
    let mut grad_norm = f64::INFINITY;
    for iter in 0..=opts.max_iter {
        let eval = full(&theta)?;
        let (weight, _) = pinv_sym(&eval.covariance, PINV_CUTOFF);
        let w_psi = &weight * &eval.psi;
        let descent = eval.sensitivity.transpose() * &w_psi;
        grad_norm = sup_norm(descent.as_slice());
        let current = 0.5 * eval.psi.dot(&w_psi);
        if grad_norm <= opts.tol {
            return Ok(GnOutcome {
                theta,
                iterations: iter,
                grad_norm,
                objective: current,
                eval,
                weight,
                steps,
            });
        }
        if iter == opts.max_iter {
            break;
        }
        let ws = &weight * &eval.sensitivity;
        let hess = eval.sensitivity.transpose() * ws;
        let delta = solve_spd_damped(&hess, &descent)?;

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let trial = &theta + &delta * alpha;
            if let Ok(psi) = psi_only(&trial) {
                let m = quad(&psi, &weight);
                // Strict decrease: a step halved down to rounding would
                // otherwise be accepted without moving.
                if m.is_finite() && m < current {
                    accepted = Some((trial, m));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, m)) => {
                steps.push(AcceptedStep {
                    before: current,
                    after: m,
                });
                theta = trial;
            }
            None => {
                // At the floating-point floor of the merit the predicted
                // decrease is negligible; report the point as stationary.
                let decrement = descent.dot(&delta);
                if decrement <= 1e-12 * current.max(f64::MIN_POSITIVE) || decrement < 1e-300 {
                    return Ok(GnOutcome {
                        theta,
                        iterations: iter,
                        grad_norm,
                        objective: current,
                        eval,
                        weight,
                        steps,
                    });
                }
                return Err(FusionError::NonConvergence {
                    iterations: iter,
                    grad_norm,
                    last_iterate: theta.iter().cloned().collect(),
                });
            }
        }
    }
    Err(FusionError::NonConvergence {
        iterations: opts.max_iter,
        grad_norm,
        last_iterate: theta.iter().cloned().collect(),
    })
}
