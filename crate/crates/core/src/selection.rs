//! Warm-started `lambda` path and GMM-BIC selection.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{admm_solve, extract_partition, AdmmConfig};
use crate::error::{FusionError, Result};
use crate::gmm::{weighted_quadratic, PartitionMap, StackedSystem};
use crate::model::qif_fit_source;
use crate::penalty::{PairSet, PenaltyConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathRecord {
    pub lambda: f64,
    pub beta_hat: Vec<f64>,
    pub partition: PartitionMap,
    pub n_groups: usize,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    pub eligible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionPath {
    pub lambdas: Vec<f64>,
    pub records: Vec<PathRecord>,
    pub selected: usize,
    pub warning: Option<String>,
}

impl SolutionPath {
    pub fn selected_record(&self) -> &PathRecord {
        &self.records[self.selected]
    }

    pub fn selected_lambda(&self) -> f64 {
        self.lambdas[self.selected]
    }
}

/// Per-source QIF estimates stacked in source order, each started at zero.
pub fn initial_qif_fits(system: &StackedSystem) -> Result<Vec<f64>> {
    let q = system.q();
    let mut beta = Vec::with_capacity(system.beta_dim());
    for block in system.dataset().blocks() {
        beta.extend(qif_fit_source(block, &vec![0.0; q])?.beta);
    }
    Ok(beta)
}

/// `N Psi' V^- Psi - log(N) (sum q s_jk - G q)` at `beta_hat`.
pub fn gmm_bic(system: &StackedSystem, beta_hat: &[f64], n_groups: usize) -> Result<f64> {
    let ev = system.evaluate(beta_hat, false)?;
    bic_from_parts(
        system.n_total(),
        &ev.psi.mean,
        &ev.covariance,
        system.n_moments(),
        n_groups,
        system.q(),
    )
}

pub fn bic_from_parts(
    n_total: usize,
    psi: &DVector<f64>,
    covariance: &DMatrix<f64>,
    n_moments: usize,
    n_groups: usize,
    q: usize,
) -> Result<f64> {
    let fit = 2.0 * weighted_quadratic(psi, covariance)?.value;
    let n = n_total as f64;
    Ok(n * fit - n.ln() * (n_moments as f64 - (n_groups * q) as f64))
}

/// Largest pairwise L1 difference of a stacked source vector; beyond this
/// `lambda` the flat part of the penalty covers every initial difference.
pub fn suggest_lambda_max(beta: &[f64], q: usize, pairs: &PairSet) -> f64 {
    pairs
        .iter()
        .map(|(a, b)| {
            (0..q)
                .map(|r| (beta[a * q + r] - beta[b * q + r]).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Runs the path starting from per-source QIF fits.
pub fn run_path(
    system: &StackedSystem,
    pairs: &PairSet,
    lambdas: &[f64],
    penalty: PenaltyConfig,
    admm: AdmmConfig,
    exclude_homogeneous: bool,
) -> Result<SolutionPath> {
    let init = initial_qif_fits(system)?;
    run_path_from(system, pairs, lambdas, penalty, admm, exclude_homogeneous, &init)
}

/// Runs the path from an explicit starting vector; each `lambda` is warm
/// started at the previous solution.
pub fn run_path_from(
    system: &StackedSystem,
    pairs: &PairSet,
    lambdas: &[f64],
    penalty: PenaltyConfig,
    admm: AdmmConfig,
    exclude_homogeneous: bool,
    beta_init: &[f64],
) -> Result<SolutionPath> {
    if lambdas.is_empty() {
        return Err(FusionError::Config("lambda grid is empty".into()));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(FusionError::Config("lambda grid must be nonnegative".into()));
    }
    if lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(FusionError::Config("lambda grid must be ascending".into()));
    }
    let mut start = beta_init.to_vec();
    let mut records = Vec::with_capacity(lambdas.len());
    let mut failures = Vec::new();
    for &lambda in lambdas {
        let cfg = penalty.with_lambda(lambda);
        match admm_solve(system, pairs, cfg, admm, &start) {
            Ok(state) => {
                let partition = extract_partition(&state, pairs, admm.fuse_epsilon);
                let n_groups = partition.n_groups();
                let bic = gmm_bic(system, &state.beta, n_groups)?;
                start = state.beta.clone();
                records.push(PathRecord {
                    lambda,
                    beta_hat: state.beta,
                    partition,
                    n_groups,
                    bic,
                    converged: state.converged,
                    iterations: state.iteration,
                    eligible: false,
                });
            }
            Err(e @ (FusionError::Config(_) | FusionError::Dimension(_) | FusionError::InvalidInput(_))) => {
                return Err(e)
            }
            Err(e) => {
                failures.push(format!("lambda {lambda}: {e}"));
                records.push(PathRecord {
                    lambda,
                    beta_hat: start.clone(),
                    partition: PartitionMap::singletons(system.n_sources()),
                    n_groups: system.n_sources(),
                    bic: f64::INFINITY,
                    converged: false,
                    iterations: 0,
                    eligible: false,
                });
            }
        }
    }

    let pick = |records: &[PathRecord], allow: &dyn Fn(&PathRecord) -> bool| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in records.iter().enumerate() {
            if !allow(r) {
                continue;
            }
            // `<=` prefers the larger lambda on ties.
            if best.is_none_or(|b| r.bic <= records[b].bic) {
                best = Some(i);
            }
        }
        best
    };

    for r in records.iter_mut() {
        r.eligible = r.converged && r.bic.is_finite() && !(exclude_homogeneous && r.n_groups == 1);
    }
    let mut warning = None;
    let selected = match pick(&records, &|r| r.eligible) {
        Some(i) => i,
        None => match pick(&records, &|r| r.converged && r.bic.is_finite()) {
            Some(i) => {
                let msg = "every converged lambda yields a homogeneous partition; \
                           selecting among all converged records"
                    .to_string();
                warn!("{msg}");
                warning = Some(msg);
                i
            }
            None => {
                return Err(FusionError::Path(format!(
                    "no lambda converged{}",
                    if failures.is_empty() {
                        String::new()
                    } else {
                        format!(" ({})", failures.join("; "))
                    }
                )))
            }
        },
    };
    Ok(SolutionPath {
        lambdas: lambdas.to_vec(),
        records,
        selected,
        warning,
    })
}

/// Writes `lambda,n_groups,bic,converged,iterations,selected,partition`
/// rows with full-precision numbers.
pub fn write_path_table<W: Write>(path: &SolutionPath, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "n_groups", "bic", "converged", "iterations", "selected", "partition"])?;
    for (i, r) in path.records.iter().enumerate() {
        w.write_record([
            format!("{}", r.lambda),
            r.n_groups.to_string(),
            format!("{}", r.bic),
            r.converged.to_string(),
            r.iterations.to_string(),
            (i == path.selected).to_string(),
            r.partition.signature(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bic_degrees_of_freedom() {
        let psi = DVector::zeros(4);
        let v = DMatrix::identity(4, 4);
        let n = 100;
        let b1 = bic_from_parts(n, &psi, &v, 12, 1, 2).unwrap();
        assert!((b1 + (100f64).ln() * 10.0).abs() < 1e-12);
        let b2 = bic_from_parts(n, &psi, &v, 12, 2, 2).unwrap();
        assert!((b2 - b1 - 2.0 * (100f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lambda_max_is_largest_l1_gap() {
        let pairs = PairSet::new(3, 1);
        let beta = [0.0, 0.0, 1.0, -1.0, 0.5, 0.5];
        assert_eq!(suggest_lambda_max(&beta, 2, &pairs), 2.0);
    }
}
