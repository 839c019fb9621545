//! ADMM for the penalized GMM objective at a fixed `lambda`.
//!
//! Each pair `(a, b)` carries a difference variable `gamma` constrained to
//! `beta_a - beta_b` and a multiplier `t`. One iteration takes a single
//! damped Gauss-Newton step in `beta` on the augmented Lagrangian (weight
//! frozen at the current iterate), then updates every `gamma` by its exact
//! proximal map and every `t` by dual ascent.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::gmm::{PartitionMap, StackEval, StackedSystem};
use crate::linalg::{pinv_sym, solve_spd_damped, sup_norm, PINV_CUTOFF};
use crate::penalty::{gamma_prox, mcp, PairSet, PenaltyConfig};
use crate::union_find::DisjointSet;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub rho: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// Pairs with `|gamma|_inf <= fuse_epsilon` are fused.
    pub fuse_epsilon: f64,
    /// Keep a per-iteration trace in the returned state.
    pub trace: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            tol_primal: 1e-5,
            tol_dual: 1e-5,
            max_iter: 1000,
            fuse_epsilon: 0.0,
            trace: false,
        }
    }
}

/// One line of the optional iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub n_groups: usize,
}

/// Writes trace records as JSON lines.
pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub beta: Vec<f64>,
    /// Aligned with `PairSet::pairs()`.
    pub gamma: Vec<Vec<f64>>,
    pub multipliers: Vec<Vec<f64>>,
    /// `V_N` at the start of the last iteration.
    pub frozen_covariance: DMatrix<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iteration: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

/// Diagnostics of a single iteration.
#[derive(Debug, Clone)]
pub struct IterationReport {
    pub iteration: usize,
    pub merit_before: f64,
    pub merit_after: f64,
    pub step_norm: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub converged: bool,
}

pub struct AdmmSolver<'a> {
    system: &'a StackedSystem,
    pairs: &'a PairSet,
    penalty: PenaltyConfig,
    config: AdmmConfig,
    state: SolverState,
    /// Full evaluation at the current `beta`, kept from the line search.
    cached: Option<StackEval>,
}

fn diff(beta: &[f64], a: usize, b: usize, q: usize) -> Vec<f64> {
    (0..q).map(|r| beta[a * q + r] - beta[b * q + r]).collect()
}

impl<'a> AdmmSolver<'a> {
    /// `gamma` starts at the pairwise differences of `beta_init`, `t` at zero.
    /// The step `rho` of `config` overrides the one in `penalty`.
    pub fn new(
        system: &'a StackedSystem,
        pairs: &'a PairSet,
        penalty: PenaltyConfig,
        config: AdmmConfig,
        beta_init: &[f64],
    ) -> Result<Self> {
        let penalty = PenaltyConfig {
            rho: config.rho,
            ..penalty
        };
        penalty.validate()?;
        if !(config.tol_primal > 0.0 && config.tol_dual > 0.0) || config.max_iter == 0 {
            return Err(FusionError::Config("ADMM tolerances and max_iter must be positive".into()));
        }
        if config.fuse_epsilon < 0.0 {
            return Err(FusionError::Config("fuse_epsilon must be nonnegative".into()));
        }
        if pairs.n_sources() != system.n_sources() {
            return Err(FusionError::Dimension(format!(
                "pair set covers {} sources, system has {}",
                pairs.n_sources(),
                system.n_sources()
            )));
        }
        if beta_init.len() != system.beta_dim() {
            return Err(FusionError::Dimension(format!(
                "beta_init has length {}, expected {}",
                beta_init.len(),
                system.beta_dim()
            )));
        }
        if beta_init.iter().any(|b| !b.is_finite()) {
            return Err(FusionError::InvalidInput("non-finite beta_init".into()));
        }
        let q = system.q();
        let gamma = pairs.iter().map(|(a, b)| diff(beta_init, a, b, q)).collect();
        let multipliers = vec![vec![0.0; q]; pairs.len()];
        let d = system.total_dim();
        Ok(Self {
            system,
            pairs,
            penalty,
            config,
            state: SolverState {
                beta: beta_init.to_vec(),
                gamma,
                multipliers,
                frozen_covariance: DMatrix::zeros(d, d),
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                iteration: 0,
                converged: false,
                trace: Vec::new(),
            },
            cached: None,
        })
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn into_state(self) -> SolverState {
        self.state
    }

    /// Augmented-Lagrangian terms coupling `beta` to the current `gamma`, `t`.
    fn coupling(&self, beta: &[f64]) -> f64 {
        let q = self.system.q();
        let rho = self.penalty.rho;
        self.pairs
            .iter()
            .enumerate()
            .map(|(p, (a, b))| {
                let g = &self.state.gamma[p];
                let t = &self.state.multipliers[p];
                (0..q)
                    .map(|r| {
                        let res = beta[a * q + r] - beta[b * q + r] - g[r];
                        t[r] * res + 0.5 * rho * res * res
                    })
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn step(&mut self) -> Result<IterationReport> {
        let q = self.system.q();
        let rho = self.penalty.rho;
        let dim = self.system.beta_dim();
        let beta = self.state.beta.clone();

        let ev = match self.cached.take() {
            Some(ev) => ev,
            None => self.system.evaluate(&beta, true)?,
        };
        let (weight, _) = pinv_sym(&ev.covariance, PINV_CUTOFF);
        let sens = ev.sensitivity.as_ref().expect("requested");
        let w_psi = &weight * &ev.psi.mean;

        let mut grad = -(sens.transpose() * &w_psi);
        let mut hess = sens.transpose() * (&weight * sens);
        for (p, (a, b)) in self.pairs.iter().enumerate() {
            let g = &self.state.gamma[p];
            let t = &self.state.multipliers[p];
            for r in 0..q {
                let u = t[r] + rho * (beta[a * q + r] - beta[b * q + r] - g[r]);
                grad[a * q + r] += u;
                grad[b * q + r] -= u;
                let (ia, ib) = (a * q + r, b * q + r);
                hess[(ia, ia)] += rho;
                hess[(ib, ib)] += rho;
                hess[(ia, ib)] -= rho;
                hess[(ib, ia)] -= rho;
            }
        }
        let delta = solve_spd_damped(&hess, &(-grad))?;

        let merit_before = 0.5 * ev.psi.mean.dot(&w_psi) + self.coupling(&beta);
        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<f64>, f64, DVector<f64>)> = None;
        for h in 0..MAX_HALVINGS {
            let trial: Vec<f64> = (0..dim).map(|i| beta[i] + alpha * delta[i]).collect();
            // The full step is nearly always taken, so evaluate it completely
            // and hand the result to the next iteration.
            let full = if h == 0 {
                self.system.evaluate(&trial, true).ok()
            } else {
                None
            };
            let psi = match &full {
                Some(ev) => Ok(ev.psi.mean.clone()),
                None => self.system.psi_mean(&trial),
            };
            if let Ok(psi) = psi {
                let m = 0.5 * psi.dot(&(&weight * &psi)) + self.coupling(&trial);
                if m.is_finite() && m <= merit_before {
                    accepted = Some((trial, m, psi));
                    self.cached = full;
                    break;
                }
            }
            alpha *= 0.5;
        }
        let (new_beta, merit_after, psi_new) = match accepted {
            Some(x) => x,
            None => (beta.clone(), merit_before, ev.psi.mean.clone()),
        };
        let step_norm = new_beta
            .iter()
            .zip(&beta)
            .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()));

        let mut primal = 0.0_f64;
        let mut dual = 0.0_f64;
        let mut penalty_value = 0.0;
        let mut coupling = 0.0;
        for (p, (a, b)) in self.pairs.iter().enumerate() {
            let d = diff(&new_beta, a, b, q);
            let t = &mut self.state.multipliers[p];
            let zeta: Vec<f64> = (0..q).map(|r| d[r] + t[r] / rho).collect();
            let g_new = gamma_prox(&zeta, &self.penalty)?;
            let g_old = std::mem::replace(&mut self.state.gamma[p], g_new);
            let g_new = &self.state.gamma[p];
            let mut res2 = 0.0;
            let mut change2 = 0.0;
            for r in 0..q {
                let res = d[r] - g_new[r];
                t[r] += rho * res;
                res2 += res * res;
                change2 += (g_new[r] - g_old[r]).powi(2);
                coupling += t[r] * res + 0.5 * rho * res * res;
            }
            primal = primal.max(res2.sqrt());
            dual = dual.max(rho * change2.sqrt());
            penalty_value += mcp(g_new.iter().map(|x| x.abs()).sum(), &self.penalty);
        }

        let iteration = self.state.iteration + 1;
        let finite = new_beta.iter().all(|x| x.is_finite())
            && self.state.multipliers.iter().flatten().all(|x| x.is_finite())
            && primal.is_finite()
            && dual.is_finite();
        if !finite {
            return Err(FusionError::Divergence {
                iteration,
                primal,
                dual,
            });
        }

        let objective = 0.5 * psi_new.dot(&(&weight * &psi_new)) + penalty_value + coupling;
        let converged = primal <= self.config.tol_primal
            && dual <= self.config.tol_dual
            && step_norm <= self.config.tol_primal;

        self.state.beta = new_beta;
        self.state.frozen_covariance = ev.covariance;
        self.state.primal_residual = primal;
        self.state.dual_residual = dual;
        self.state.iteration = iteration;
        self.state.converged = converged;
        if self.config.trace {
            let n_groups =
                extract_partition(&self.state, self.pairs, self.config.fuse_epsilon).n_groups();
            self.state.trace.push(TraceRecord {
                iteration,
                objective,
                primal_residual: primal,
                dual_residual: dual,
                n_groups,
            });
        }
        Ok(IterationReport {
            iteration,
            merit_before,
            merit_after,
            step_norm,
            primal_residual: primal,
            dual_residual: dual,
            objective,
            converged,
        })
    }

    /// Iterates until converged or `max_iter`; the state records which.
    pub fn run(mut self) -> Result<SolverState> {
        while self.state.iteration < self.config.max_iter {
            if self.step()?.converged {
                break;
            }
        }
        Ok(self.state)
    }
}

/// Runs ADMM to termination for one `lambda`.
pub fn admm_solve(
    system: &StackedSystem,
    pairs: &PairSet,
    penalty: PenaltyConfig,
    admm: AdmmConfig,
    beta_init: &[f64],
) -> Result<SolverState> {
    AdmmSolver::new(system, pairs, penalty, admm, beta_init)?.run()
}

/// Partition from the fused pairs, closed transitively.
pub fn extract_partition(state: &SolverState, pairs: &PairSet, fuse_epsilon: f64) -> PartitionMap {
    let mut ds = DisjointSet::new(pairs.n_sources());
    for (p, (a, b)) in pairs.iter().enumerate() {
        if sup_norm(&state.gamma[p]) <= fuse_epsilon {
            ds.union(a, b);
        }
    }
    PartitionMap::from_labels(&ds.roots())
}

/// Plain within-group averages of the source estimates.
pub fn representative_beta(state: &SolverState, partition: &PartitionMap, q: usize) -> Vec<Vec<f64>> {
    partition
        .group_means(&state.beta, q)
        .chunks(q)
        .map(|c| c.to_vec())
        .collect()
}
