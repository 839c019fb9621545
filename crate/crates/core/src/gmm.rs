//! Stacked estimating functions over all J x K sources, the sample
//! covariance weight, and the known-partition GMM estimator.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::StudyDataset;
use crate::error::{FusionError, Result};
use crate::gauss_newton::{self, AcceptedStep, GnOptions, MomentEval};
use crate::linalg::{check_symmetric, inverse_spd, pinv_sym, PINV_CUTOFF};

/// All sources stacked in source-index order with their psi-block offsets.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    dataset: StudyDataset,
    offsets: Vec<Range<usize>>,
    study_offsets: Vec<Range<usize>>,
    total_dim: usize,
}

/// Per-participant stacked psi, stored per study because a participant's
/// vector is zero outside its own study's blocks.
#[derive(Debug, Clone)]
pub struct StackedPsi {
    /// For study k: (study psi dim) x n_k, column i is participant i.
    pub per_study: Vec<DMatrix<f64>>,
    /// `Psi_N`.
    pub mean: DVector<f64>,
}

/// Everything the estimators need at one `beta`.
#[derive(Debug, Clone)]
pub struct StackEval {
    pub psi: StackedPsi,
    /// `V_N`.
    pub covariance: DMatrix<f64>,
    /// `S = -dPsi_N/dbeta`, total_dim x JKq; present when requested.
    pub sensitivity: Option<DMatrix<f64>>,
    /// Unscaled per-source `S_jk` blocks, (q s_jk) x q.
    pub source_sensitivity: Vec<DMatrix<f64>>,
}

impl StackedSystem {
    pub fn new(dataset: StudyDataset) -> Result<Self> {
        let mut offsets = Vec::with_capacity(dataset.n_sources());
        let mut study_offsets = Vec::with_capacity(dataset.n_studies());
        let mut at = 0;
        for k in 0..dataset.n_studies() {
            let start = at;
            for block in dataset.study(k) {
                offsets.push(at..at + block.psi_dim());
                at += block.psi_dim();
            }
            study_offsets.push(start..at);
        }
        let n = dataset.n_total();
        if at >= n {
            return Err(FusionError::Dimension(format!(
                "stacked estimating functions have dimension {at}, which must be below N = {n}"
            )));
        }
        Ok(Self {
            dataset,
            offsets,
            study_offsets,
            total_dim: at,
        })
    }

    pub fn dataset(&self) -> &StudyDataset {
        &self.dataset
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn n_sources(&self) -> usize {
        self.dataset.n_sources()
    }

    pub fn q(&self) -> usize {
        self.dataset.q()
    }

    /// JKq.
    pub fn beta_dim(&self) -> usize {
        self.n_sources() * self.q()
    }

    pub fn n_total(&self) -> usize {
        self.dataset.n_total()
    }

    /// Index range of source `idx` inside `Psi_N`.
    pub fn offset(&self, idx: usize) -> Range<usize> {
        self.offsets[idx].clone()
    }

    pub fn study_range(&self, k: usize) -> Range<usize> {
        self.study_offsets[k].clone()
    }

    /// Total number of moment conditions, `sum_jk q s_jk`.
    pub fn n_moments(&self) -> usize {
        self.total_dim
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.beta_dim() {
            return Err(FusionError::Dimension(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.beta_dim()
            )));
        }
        Ok(())
    }

    /// Evaluates `Psi_N`, `V_N` and optionally `S` at `beta` (k-major, j-minor).
    pub fn evaluate(&self, beta: &[f64], with_sensitivity: bool) -> Result<StackEval> {
        self.check_beta(beta)?;
        let q = self.q();
        let n_total = self.n_total() as f64;
        let mut per_study = Vec::with_capacity(self.dataset.n_studies());
        let mut mean = DVector::zeros(self.total_dim);
        let mut source_sensitivity = Vec::new();
        let mut sensitivity = with_sensitivity
            .then(|| DMatrix::zeros(self.total_dim, self.beta_dim()));

        for k in 0..self.dataset.n_studies() {
            let study_range = self.study_range(k);
            let n_k = self.dataset.study_size(k);
            let weight = n_k as f64 / n_total;
            let mut mat = DMatrix::zeros(study_range.len(), n_k);
            for (j, block) in self.dataset.study(k).iter().enumerate() {
                let idx = self.dataset.source_index(k, j);
                let range = self.offset(idx);
                let local = range.start - study_range.start;
                let b = &beta[idx * q..(idx + 1) * q];
                let (psi, sens) = block.evaluate(b, with_sensitivity)?;
                mat.rows_mut(local, range.len())
                    .copy_from(&psi.per_participant);
                mean.rows_mut(range.start, range.len())
                    .copy_from(&(psi.mean * weight));
                if let (Some(s), Some(full)) = (sens, sensitivity.as_mut()) {
                    full.view_mut((range.start, idx * q), (range.len(), q))
                        .copy_from(&(&s * weight));
                    source_sensitivity.push(s);
                }
            }
            per_study.push(mat);
        }
        let psi = StackedPsi { per_study, mean };
        let covariance = sample_covariance(self, &psi);
        Ok(StackEval {
            psi,
            covariance,
            sensitivity,
            source_sensitivity,
        })
    }

    /// `Psi_N(beta)` only, skipping the covariance and derivatives.
    pub fn psi_mean(&self, beta: &[f64]) -> Result<DVector<f64>> {
        self.check_beta(beta)?;
        let q = self.q();
        let n_total = self.n_total() as f64;
        let mut mean = DVector::zeros(self.total_dim);
        for (idx, block) in self.dataset.blocks().enumerate() {
            let range = self.offset(idx);
            let w = block.n() as f64 / n_total;
            let psi = block.psi(&beta[idx * q..(idx + 1) * q])?;
            mean.rows_mut(range.start, range.len())
                .copy_from(&(psi.mean * w));
        }
        Ok(mean)
    }
}

impl StackedPsi {
    /// Dense stacked psi of participant `i` of study `k`, zero outside study k.
    pub fn participant(&self, system: &StackedSystem, k: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(system.total_dim());
        let range = system.study_range(k);
        v.rows_mut(range.start, range.len())
            .copy_from(&self.per_study[k].column(i));
        v
    }
}

/// Per-participant stacked psi and their mean.
pub fn stack_psi(system: &StackedSystem, beta: &[f64]) -> Result<StackedPsi> {
    Ok(system.evaluate(beta, false)?.psi)
}

/// `V_N = (1/N) sum_i psi_i psi_i'`; cross-study blocks are exactly zero.
pub fn sample_covariance(system: &StackedSystem, psi: &StackedPsi) -> DMatrix<f64> {
    debug_assert_eq!(psi.per_study.len(), system.dataset().n_studies());
    covariance_of(&psi.per_study)
}

/// Block-diagonal mean outer product of per-study psi matrices (columns are
/// participants), with `N` the total column count.
pub fn covariance_of(per_study: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n_total: usize = per_study.iter().map(|m| m.ncols()).sum();
    let d: usize = per_study.iter().map(|m| m.nrows()).sum();
    let mut v = DMatrix::zeros(d, d);
    let mut at = 0;
    for mat in per_study {
        let r = mat.nrows();
        let block = mat * mat.transpose() / n_total as f64;
        v.view_mut((at, at), (r, r)).copy_from(&block);
        at += r;
    }
    v
}

/// `1/2 Psi' V^- Psi` with the generalized inverse retained for gradients.
#[derive(Debug, Clone)]
pub struct WeightedQuadratic {
    pub value: f64,
    pub weight: DMatrix<f64>,
    pub rank: usize,
    psi: DVector<f64>,
}

impl WeightedQuadratic {
    /// `S' V^- Psi`, the negative gradient of the frozen-weight form when
    /// `S = -dPsi/dbeta`.
    pub fn gradient(&self, sensitivity: &DMatrix<f64>) -> DVector<f64> {
        sensitivity.transpose() * (&self.weight * &self.psi)
    }
}

pub fn weighted_quadratic(psi: &DVector<f64>, v: &DMatrix<f64>) -> Result<WeightedQuadratic> {
    check_symmetric(v)?;
    if v.nrows() != psi.len() {
        return Err(FusionError::Dimension(format!(
            "psi has length {}, covariance is {}x{}",
            psi.len(),
            v.nrows(),
            v.ncols()
        )));
    }
    let (weight, rank) = pinv_sym(v, PINV_CUTOFF);
    let value = (0.5 * psi.dot(&(&weight * psi))).max(0.0);
    Ok(WeightedQuadratic {
        value,
        weight,
        rank,
        psi: psi.clone(),
    })
}

/// Assignment of the J x K sources to G groups.
///
/// Group labels are canonical: groups are numbered by their smallest member
/// in source-index order, so two maps are equal iff they describe the same
/// partition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionMap {
    assignment: Vec<usize>,
    n_groups: usize,
}

impl PartitionMap {
    /// Builds a partition from arbitrary labels, relabelling canonically.
    pub fn from_labels<T: PartialEq + Clone>(labels: &[T]) -> Self {
        let mut seen: Vec<T> = Vec::new();
        let assignment = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(g) => g,
                None => {
                    seen.push(l.clone());
                    seen.len() - 1
                }
            })
            .collect();
        Self {
            assignment,
            n_groups: seen.len(),
        }
    }

    pub fn singletons(n_sources: usize) -> Self {
        Self {
            assignment: (0..n_sources).collect(),
            n_groups: n_sources,
        }
    }

    pub fn homogeneous(n_sources: usize) -> Self {
        Self {
            assignment: vec![0; n_sources],
            n_groups: usize::from(n_sources > 0),
        }
    }

    pub fn n_sources(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn group_of(&self, source: usize) -> usize {
        self.assignment[source]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Members of each group in source-index order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups];
        for (s, &g) in self.assignment.iter().enumerate() {
            out[g].push(s);
        }
        out
    }

    /// `Pi*`, the (JK) x G membership matrix.
    pub fn membership(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_sources(), self.n_groups);
        for (s, &g) in self.assignment.iter().enumerate() {
            m[(s, g)] = 1.0;
        }
        m
    }

    /// `Pi = Pi* kron I_q`, the (JKq) x (Gq) expansion matrix.
    pub fn expansion(&self, q: usize) -> DMatrix<f64> {
        self.membership().kronecker(&DMatrix::identity(q, q))
    }

    /// `Pi theta`.
    pub fn expand(&self, theta: &[f64], q: usize) -> Vec<f64> {
        let mut beta = Vec::with_capacity(self.n_sources() * q);
        for &g in &self.assignment {
            beta.extend_from_slice(&theta[g * q..(g + 1) * q]);
        }
        beta
    }

    /// Within-group averages of a stacked source vector.
    pub fn group_means(&self, beta: &[f64], q: usize) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_groups * q];
        let mut counts = vec![0usize; self.n_groups];
        for (s, &g) in self.assignment.iter().enumerate() {
            counts[g] += 1;
            for r in 0..q {
                sums[g * q + r] += beta[s * q + r];
            }
        }
        for g in 0..self.n_groups {
            for r in 0..q {
                sums[g * q + r] /= counts[g] as f64;
            }
        }
        sums
    }

    /// A short textual signature such as `0-0-1-1`.
    pub fn signature(&self) -> String {
        self.assignment
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Known-partition GMM fit.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub theta: Vec<f64>,
    /// `(Pi' S' V^- S Pi)^{-1} / N`.
    pub covariance: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub steps: Vec<AcceptedStep>,
}

impl GmmFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// GMM estimate of the group parameters for a known partition. With the
/// singleton partition this is the heterogeneous estimator.
pub fn gmm_estimate(
    system: &StackedSystem,
    partition: &PartitionMap,
    theta0: &[f64],
) -> Result<GmmFit> {
    gmm_estimate_with(system, partition, theta0, &GnOptions::default())
}

pub fn gmm_estimate_with(
    system: &StackedSystem,
    partition: &PartitionMap,
    theta0: &[f64],
    opts: &GnOptions,
) -> Result<GmmFit> {
    let q = system.q();
    if partition.n_sources() != system.n_sources() {
        return Err(FusionError::Dimension(format!(
            "partition covers {} sources, system has {}",
            partition.n_sources(),
            system.n_sources()
        )));
    }
    if theta0.len() != partition.n_groups() * q {
        return Err(FusionError::Dimension(format!(
            "theta0 has length {}, expected {}",
            theta0.len(),
            partition.n_groups() * q
        )));
    }
    if theta0.iter().any(|t| !t.is_finite()) {
        return Err(FusionError::InvalidInput("non-finite theta0".into()));
    }
    let pi = partition.expansion(q);
    let full = |theta: &DVector<f64>| -> Result<MomentEval> {
        let beta = partition.expand(theta.as_slice(), q);
        let ev = system.evaluate(&beta, true)?;
        let s = ev.sensitivity.expect("requested");
        Ok(MomentEval {
            psi: ev.psi.mean,
            covariance: ev.covariance,
            sensitivity: s * &pi,
        })
    };
    let psi_only = |theta: &DVector<f64>| system.psi_mean(&partition.expand(theta.as_slice(), q));
    let out = gauss_newton::minimize(DVector::from_column_slice(theta0), full, psi_only, opts)?;

    let s = &out.eval.sensitivity;
    let godambe = s.transpose() * &out.weight * s;
    let n = system.n_total() as f64;
    let covariance = inverse_spd(&godambe)
        .unwrap_or_else(|| pinv_sym(&godambe, PINV_CUTOFF).0)
        / n;
    Ok(GmmFit {
        theta: out.theta.iter().cloned().collect(),
        covariance,
        objective: out.objective,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
        steps: out.steps,
    })
}
