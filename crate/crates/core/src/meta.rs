//! Efficiency-weighted combination of source estimates over a partition.
//!
//! Source blocks are re-ordered group by group; the sample sensitivity and
//! variability matrices at `beta_hat` then define a weighted least-squares
//! fit of the group parameters to the linearized source estimates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{FusionError, Result};
use crate::gmm::{PartitionMap, StackedSystem};
use crate::linalg::{inverse_spd, pinv_sym, PINV_CUTOFF};

pub const DEFAULT_CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaEstimate {
    pub partition: PartitionMap,
    /// Group-major, `G * q` entries.
    pub theta: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub ci_level: f64,
    pub intervals: Vec<(f64, f64)>,
}

impl MetaEstimate {
    /// Asymptotic standard errors, `sqrt(diag(cov))`.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }
}

/// Source order grouped by partition group, and the induced permutation of
/// psi coordinates.
fn grouped_order(system: &StackedSystem, partition: &PartitionMap) -> (Vec<usize>, Vec<usize>) {
    let sources: Vec<usize> = partition.groups().into_iter().flatten().collect();
    let coords = sources
        .iter()
        .flat_map(|&s| system.offset(s))
        .collect();
    (sources, coords)
}

fn rank_deficient_group(godambe: &DMatrix<f64>, n_groups: usize, q: usize) -> usize {
    for g in 0..n_groups {
        let block = godambe.view((g * q, g * q), (q, q)).into_owned();
        if inverse_spd(&block).is_none() {
            return g;
        }
    }
    let eig = SymmetricEigen::new(godambe.clone());
    let (min_col, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let v = eig.eigenvectors.column(min_col);
    (0..n_groups)
        .max_by(|&a, &b| {
            let na = v.rows(a * q, q).norm();
            let nb = v.rows(b * q, q).norm();
            na.partial_cmp(&nb).expect("finite")
        })
        .unwrap_or(0)
}

/// Integrated meta-estimate of the group parameters at `beta_hat`.
pub fn meta_combine(
    system: &StackedSystem,
    partition: &PartitionMap,
    beta_hat: &[f64],
) -> Result<MetaEstimate> {
    let q = system.q();
    if partition.n_sources() != system.n_sources() {
        return Err(FusionError::Dimension(format!(
            "partition covers {} sources, system has {}",
            partition.n_sources(),
            system.n_sources()
        )));
    }
    if beta_hat.iter().any(|b| !b.is_finite()) {
        return Err(FusionError::InvalidInput("non-finite beta_hat".into()));
    }
    let ev = system.evaluate(beta_hat, true)?;
    let n_total = system.n_total() as f64;
    let n_groups = partition.n_groups();
    let (sources, coords) = grouped_order(system, partition);
    let d = coords.len();

    let v_tilde = DMatrix::from_fn(d, d, |i, j| ev.covariance[(coords[i], coords[j])]);
    let mut s_tilde = DMatrix::zeros(d, n_groups * q);
    let mut target = DVector::zeros(d);
    let mut row = 0;
    for &s in &sources {
        let (k, _) = system.dataset().source_coords(s);
        let w = system.dataset().study_size(k) as f64 / n_total;
        let scaled = &ev.source_sensitivity[s] * w;
        let rows = scaled.nrows();
        let g = partition.group_of(s);
        s_tilde.view_mut((row, g * q), (rows, q)).copy_from(&scaled);
        let b = DVector::from_column_slice(&beta_hat[s * q..(s + 1) * q]);
        target.rows_mut(row, rows).copy_from(&(&scaled * b));
        row += rows;
    }

    let (weight, _) = pinv_sym(&v_tilde, PINV_CUTOFF);
    let ws = &weight * &s_tilde;
    let godambe = s_tilde.transpose() * &ws;
    let scale = godambe.amax().max(f64::MIN_POSITIVE);
    let inv = inverse_spd(&godambe)
        .filter(|inv| inv.amax() * scale < 1e12)
        .ok_or_else(|| FusionError::RankDeficient {
            group: rank_deficient_group(&godambe, n_groups, q),
        })?;
    let theta = &inv * (ws.transpose() * target);
    let covariance = inv / n_total;
    let theta: Vec<f64> = theta.iter().cloned().collect();
    let intervals = interval_bounds(&theta, &covariance, DEFAULT_CI_LEVEL)?;
    Ok(MetaEstimate {
        partition: partition.clone(),
        theta,
        covariance,
        ci_level: DEFAULT_CI_LEVEL,
        intervals,
    })
}

fn interval_bounds(theta: &[f64], cov: &DMatrix<f64>, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FusionError::InvalidInput(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    Ok(theta
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let half = z * cov[(r, r)].max(0.0).sqrt();
            (t - half, t + half)
        })
        .collect())
}

/// Normal-approximation intervals `theta_r -/+ z sqrt(cov_rr)`.
pub fn confidence_intervals(estimate: &MetaEstimate, level: f64) -> Result<Vec<(f64, f64)>> {
    interval_bounds(&estimate.theta, &estimate.covariance, level)
}

impl MetaEstimate {
    /// Recomputes the stored intervals at another level.
    pub fn with_level(mut self, level: f64) -> Result<Self> {
        self.intervals = confidence_intervals(&self, level)?;
        self.ci_level = level;
        Ok(self)
    }
}
