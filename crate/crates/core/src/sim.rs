//! Correlated-outcome generators and the replicated simulation driver.
//!
//! Outcomes are produced from a block-correlated latent Gaussian vector:
//! Gaussian responses add it to the mean, Bernoulli responses threshold it at
//! `Phi^{-1}(mu)`, and Poisson responses push `Phi(z)` through the Poisson
//! quantile function. Latent blocks for different outcome sources are
//! independent.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::admm::AdmmConfig;
use crate::dataset::StudyDataset;
use crate::error::{FusionError, Result};
use crate::gmm::{gmm_estimate, PartitionMap, StackedSystem};
use crate::meta::{confidence_intervals, meta_combine};
use crate::model::{BasisKind, LinkFamily, SourceBlock};
use crate::penalty::{PairSet, PenaltyConfig};
use crate::selection::{initial_qif_fits, run_path_from};

/// Environment variable holding the worker-thread count for replicates.
pub const THREADS_ENV: &str = "QIF_FUSION_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    Ar1,
    Exchangeable,
}

/// Within-source correlation of a latent or covariate field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub kind: CorrelationKind,
    pub rho: f64,
    /// Optional per-outcome override of `rho`, one entry per source `j`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_outcome: Option<Vec<f64>>,
}

impl Default for CorrelationSpec {
    fn default() -> Self {
        Self {
            kind: CorrelationKind::Ar1,
            rho: 0.5,
            per_outcome: None,
        }
    }
}

impl CorrelationSpec {
    pub fn ar1(rho: f64) -> Self {
        Self {
            kind: CorrelationKind::Ar1,
            rho,
            per_outcome: None,
        }
    }

    fn rho_for(&self, j: usize) -> f64 {
        self.per_outcome
            .as_ref()
            .and_then(|v| v.get(j).copied())
            .unwrap_or(self.rho)
    }

    fn validate(&self, n_outcomes: usize) -> Result<()> {
        if let Some(v) = &self.per_outcome {
            if v.len() != n_outcomes {
                return Err(FusionError::InvalidInput(format!(
                    "per-outcome correlations have {} entries, expected {n_outcomes}",
                    v.len()
                )));
            }
        }
        for j in 0..n_outcomes {
            let r = self.rho_for(j);
            let ok = match self.kind {
                CorrelationKind::Ar1 => r > -1.0 && r < 1.0,
                CorrelationKind::Exchangeable => (0.0..1.0).contains(&r),
            };
            if !ok {
                return Err(FusionError::InvalidInput(format!(
                    "correlation {r} for outcome {j} does not define a positive definite {:?} matrix",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Fills `out` with a unit-variance normal vector with this correlation.
    fn sample<R: Rng>(&self, j: usize, rng: &mut R, out: &mut [f64]) {
        let r = self.rho_for(j);
        match self.kind {
            CorrelationKind::Ar1 => {
                let scale = (1.0 - r * r).sqrt();
                let mut prev: f64 = rng.sample(StandardNormal);
                out[0] = prev;
                for o in out.iter_mut().skip(1) {
                    let e: f64 = rng.sample(StandardNormal);
                    prev = r * prev + scale * e;
                    *o = prev;
                }
            }
            CorrelationKind::Exchangeable => {
                let common: f64 = rng.sample(StandardNormal);
                let (a, b) = (r.sqrt(), (1.0 - r).sqrt());
                for o in out.iter_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *o = a * common + b * e;
                }
            }
        }
    }
}

/// Acceptance thresholds checked in gate mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub min_recovery: Option<f64>,
    pub coverage_range: Option<(f64, f64)>,
    pub min_rmse_ratio: Option<f64>,
    pub max_bias_to_ese: Option<f64>,
}

fn default_delta() -> f64 {
    3.0
}
fn default_level() -> f64 {
    0.95
}
fn default_basis() -> BasisKind {
    BasisKind::ArBand(1)
}

/// A simulation design; group labels in `partition` index `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    #[serde(default)]
    pub name: String,
    pub link: LinkFamily,
    /// Per-outcome response dimension `m_j`; its length is J.
    pub m: Vec<usize>,
    /// Per-study sample size `n_k`; its length is K.
    pub n: Vec<usize>,
    /// Group label of each source, one row per study.
    pub partition: Vec<Vec<usize>>,
    /// True parameters per group label; `q = theta[0].len()`.
    pub theta: Vec<Vec<f64>>,
    #[serde(default)]
    pub latent: CorrelationSpec,
    #[serde(default)]
    pub covariates: CorrelationSpec,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub admm: AdmmConfig,
    #[serde(default)]
    pub exclude_homogeneous: bool,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub compare_heterogeneous: bool,
    #[serde(default)]
    pub compare_oracle: bool,
    #[serde(default)]
    pub gate: GateSpec,
}

impl SimDesign {
    pub fn n_outcomes(&self) -> usize {
        self.m.len()
    }
    pub fn n_studies(&self) -> usize {
        self.n.len()
    }
    pub fn q(&self) -> usize {
        self.theta.first().map_or(0, |t| t.len())
    }
    pub fn n_sources(&self) -> usize {
        self.n_outcomes() * self.n_studies()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let d: SimDesign = toml::from_str(text)?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let (j, k, q) = (self.n_outcomes(), self.n_studies(), self.q());
        if j == 0 || k == 0 || q == 0 {
            return Err(FusionError::InvalidInput("design needs J, K, q > 0".into()));
        }
        if self.partition.len() != k || self.partition.iter().any(|row| row.len() != j) {
            return Err(FusionError::InvalidInput(format!(
                "partition must have {k} rows of {j} labels"
            )));
        }
        if self.theta.iter().any(|t| t.len() != q) {
            return Err(FusionError::InvalidInput("theta rows differ in length".into()));
        }
        if self.partition.iter().flatten().any(|&g| g >= self.theta.len()) {
            return Err(FusionError::InvalidInput("partition label without a theta row".into()));
        }
        for g in 0..self.theta.len() {
            if !self.partition.iter().flatten().any(|&l| l == g) {
                return Err(FusionError::InvalidInput(format!("theta row {g} has no sources")));
            }
        }
        if self.replicates == 0 {
            return Err(FusionError::InvalidInput("replicates must be positive".into()));
        }
        self.latent.validate(j)?;
        self.covariates.validate(j)?;
        PenaltyConfig::new(0.0, self.delta, self.admm.rho)?;
        Ok(())
    }

    /// True partition in canonical labels.
    pub fn true_partition(&self) -> PartitionMap {
        let labels: Vec<usize> = self.partition.iter().flatten().copied().collect();
        PartitionMap::from_labels(&labels)
    }

    /// True group parameters in canonical group order.
    pub fn true_theta(&self) -> Vec<f64> {
        let labels: Vec<usize> = self.partition.iter().flatten().copied().collect();
        let part = self.true_partition();
        let mut out = vec![0.0; part.n_groups() * self.q()];
        for (s, &l) in labels.iter().enumerate() {
            let g = part.group_of(s);
            out[g * self.q()..(g + 1) * self.q()].copy_from_slice(&self.theta[l]);
        }
        out
    }

    /// True stacked source parameters.
    pub fn true_beta(&self) -> Vec<f64> {
        self.partition
            .iter()
            .flatten()
            .flat_map(|&l| self.theta[l].iter().copied())
            .collect()
    }

    fn rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64);
        rng
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// Latent block-correlated normals for `n` participants of one study, each
/// an M-vector (sources concatenated in outcome order).
pub fn gen_gaussian_latent<R: Rng>(
    spec: &CorrelationSpec,
    m: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    spec.validate(m.len())?;
    let total: usize = m.iter().sum();
    Ok((0..n)
        .map(|_| {
            let mut z = vec![0.0; total];
            let mut at = 0;
            for (j, &mj) in m.iter().enumerate() {
                spec.sample(j, rng, &mut z[at..at + mj]);
                at += mj;
            }
            z
        })
        .collect())
}

/// `y = 1` iff `z <= Phi^{-1}(mu)`.
pub fn gen_bernoulli(mu: &[f64], z: &[f64]) -> Vec<f64> {
    let norm = standard_normal();
    mu.iter()
        .zip(z)
        .map(|(&p, &zi)| {
            let threshold = norm.inverse_cdf(p);
            if zi <= threshold {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Smallest `y` with `P(Y <= y) >= u` for `Y ~ Poisson(mu)`.
pub fn poisson_quantile(u: f64, mu: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let mut pmf = (-mu).exp();
    let mut cdf = pmf;
    let mut y = 0u64;
    let cap = (mu + 60.0 * mu.sqrt() + 60.0) as u64;
    while cdf < u && y < cap {
        y += 1;
        pmf *= mu / y as f64;
        cdf += pmf;
        if pmf == 0.0 && (y as f64) > mu {
            break;
        }
    }
    y as f64
}

/// `y = F^{-1}_{Pois(mu)}(Phi(z))`.
pub fn gen_poisson(mu: &[f64], z: &[f64]) -> Vec<f64> {
    let norm = standard_normal();
    mu.iter()
        .zip(z)
        .map(|(&m, &zi)| poisson_quantile(norm.cdf(zi), m))
        .collect()
}

/// Draws one replicate dataset.
pub fn gen_dataset(design: &SimDesign, replicate: usize) -> Result<StudyDataset> {
    design.validate()?;
    let mut rng = design.rng(replicate);
    let q = design.q();
    let link = design.link;
    let m = &design.m;
    let total_m: usize = m.iter().sum();
    let mut studies = Vec::with_capacity(design.n_studies());
    for (k, &n_k) in design.n.iter().enumerate() {
        let mut ys: Vec<Vec<f64>> = m.iter().map(|&mj| Vec::with_capacity(n_k * mj)).collect();
        let mut xs: Vec<Vec<f64>> = m.iter().map(|&mj| Vec::with_capacity(n_k * mj * q)).collect();
        let mut field = vec![0.0; total_m];
        for _ in 0..n_k {
            let mut fields = Vec::with_capacity(q.saturating_sub(1));
            for _ in 1..q {
                let mut at = 0;
                for (j, &mj) in m.iter().enumerate() {
                    design.covariates.sample(j, &mut rng, &mut field[at..at + mj]);
                    at += mj;
                }
                fields.push(field.clone());
            }
            let mut z = vec![0.0; total_m];
            let mut at = 0;
            for (j, &mj) in m.iter().enumerate() {
                design.latent.sample(j, &mut rng, &mut z[at..at + mj]);
                at += mj;
            }
            let mut at = 0;
            for (j, &mj) in m.iter().enumerate() {
                let theta = &design.theta[design.partition[k][j]];
                let mut mu = Vec::with_capacity(mj);
                for r in 0..mj {
                    let pos = at + r;
                    let mut row = Vec::with_capacity(q);
                    row.push(1.0);
                    for f in &fields {
                        row.push(f[pos]);
                    }
                    let eta: f64 = row.iter().zip(theta).map(|(x, b)| x * b).sum();
                    mu.push(link.mean(eta));
                    xs[j].extend_from_slice(&row);
                }
                let zj = &z[at..at + mj];
                let y = match link {
                    LinkFamily::IdentityGaussian => mu.iter().zip(zj).map(|(a, b)| a + b).collect(),
                    LinkFamily::LogitBernoulli => gen_bernoulli(&mu, zj),
                    LinkFamily::LogPoisson => gen_poisson(&mu, zj),
                };
                ys[j].extend(y);
                at += mj;
            }
        }
        let blocks = ys
            .into_iter()
            .zip(xs)
            .enumerate()
            .map(|(j, (y, x))| SourceBlock::new(k, j, m[j], q, y, x, design.basis, link))
            .collect::<Result<Vec<_>>>()?;
        studies.push(blocks);
    }
    StudyDataset::new(studies)
}

/// Outcome of one replicate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub lambda: f64,
    pub n_groups: usize,
    pub recovered: bool,
    pub partition: String,
    /// Meta-estimate in canonical group order of the selected partition.
    pub theta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covered: Vec<bool>,
    pub heterogeneous: Option<Vec<f64>>,
    pub oracle: Option<Vec<f64>>,
    pub oracle_rel_diff: Option<f64>,
    pub error: Option<String>,
}

/// Monte-Carlo summary of one (group, coefficient).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMetrics {
    pub group: usize,
    pub coefficient: usize,
    pub rmse: f64,
    pub ese: f64,
    pub ase: f64,
    pub bias: f64,
    pub cp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub setting: String,
    /// Replicates with correct recovery that enter the per-coefficient rows.
    pub n_used: usize,
    pub rows: Vec<CoefficientMetrics>,
    pub recovery_rate: f64,
    pub mean_groups: f64,
    /// Heterogeneous RMSE over fused RMSE per coefficient, source averaged.
    pub rmse_ratio: Option<Vec<f64>>,
    pub n_failed: usize,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub metrics: MetricsTable,
    pub replicates: Vec<ReplicateRecord>,
}

/// Fits one replicate: path, selection, meta-estimate and the optional
/// comparison estimators.
pub fn run_replicate(design: &SimDesign, replicate: usize) -> Result<ReplicateRecord> {
    let data = gen_dataset(design, replicate)?;
    let system = StackedSystem::new(data)?;
    let pairs = PairSet::new(design.n_outcomes(), design.n_studies());
    let penalty = PenaltyConfig::new(0.0, design.delta, design.admm.rho)?;
    let init = initial_qif_fits(&system)?;
    let path = run_path_from(
        &system,
        &pairs,
        &design.lambdas,
        penalty,
        design.admm,
        design.exclude_homogeneous,
        &init,
    )?;
    let rec = path.selected_record();
    let estimate = meta_combine(&system, &rec.partition, &rec.beta_hat)?;
    let intervals = confidence_intervals(&estimate, design.ci_level)?;
    let truth = design.true_partition();
    let recovered = rec.partition == truth;
    let covered = if recovered {
        let theta0 = design.true_theta();
        intervals
            .iter()
            .zip(&theta0)
            .map(|(&(lo, hi), &t)| lo <= t && t <= hi)
            .collect()
    } else {
        Vec::new()
    };

    let q = design.q();
    let heterogeneous = if design.compare_heterogeneous {
        let singles = PartitionMap::singletons(system.n_sources());
        Some(gmm_estimate(&system, &singles, &init)?.theta)
    } else {
        None
    };
    let (oracle, oracle_rel_diff) = if design.compare_oracle {
        let theta0 = truth.group_means(&init, q);
        let fit = gmm_estimate(&system, &truth, &theta0)?;
        let rel = recovered.then(|| {
            let num: f64 = estimate
                .theta
                .iter()
                .zip(&fit.theta)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den: f64 = fit.theta.iter().map(|b| b * b).sum::<f64>().sqrt();
            num / den
        });
        (Some(fit.theta), rel)
    } else {
        (None, None)
    };

    Ok(ReplicateRecord {
        replicate,
        lambda: path.selected_lambda(),
        n_groups: rec.n_groups,
        recovered,
        partition: rec.partition.signature(),
        std_errors: estimate.standard_errors(),
        theta: estimate.theta,
        covered,
        heterogeneous,
        oracle,
        oracle_rel_diff,
        error: None,
    })
}

/// Number of worker threads from the environment, if set.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

/// Runs every replicate and aggregates the metrics.
pub fn run_study(design: &SimDesign) -> Result<StudyOutcome> {
    design.validate()?;
    let work = || -> Vec<ReplicateRecord> {
        (0..design.replicates)
            .into_par_iter()
            .map(|r| {
                run_replicate(design, r).unwrap_or_else(|e| ReplicateRecord {
                    replicate: r,
                    error: Some(e.to_string()),
                    ..Default::default()
                })
            })
            .collect()
    };
    let replicates = match threads_from_env() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FusionError::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    let n_failed = replicates.iter().filter(|r| r.error.is_some()).count();
    if n_failed * 5 > design.replicates {
        return Err(FusionError::Study(format!(
            "{n_failed} of {} replicates failed",
            design.replicates
        )));
    }
    let metrics = aggregate(design, &replicates);
    Ok(StudyOutcome {
        metrics,
        replicates,
    })
}

struct Moments {
    rmse: f64,
    ese: f64,
    bias: f64,
}

fn moments(errors: &[f64]) -> Moments {
    let r = errors.len() as f64;
    if errors.is_empty() {
        return Moments {
            rmse: f64::NAN,
            ese: f64::NAN,
            bias: f64::NAN,
        };
    }
    let bias = errors.iter().sum::<f64>() / r;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / r).sqrt();
    let ese = if errors.len() > 1 {
        (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
    } else {
        0.0
    };
    Moments { rmse, ese, bias }
}

/// Aggregates replicate records into a metrics table. Per-coefficient rows
/// use only replicates whose selected partition equals the truth.
pub fn aggregate(design: &SimDesign, replicates: &[ReplicateRecord]) -> MetricsTable {
    let q = design.q();
    let truth = design.true_partition();
    let theta0 = design.true_theta();
    let ok: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let used: Vec<&ReplicateRecord> = ok.iter().copied().filter(|r| r.recovered).collect();

    let mut rows = Vec::new();
    for g in 0..truth.n_groups() {
        for c in 0..q {
            let idx = g * q + c;
            let errors: Vec<f64> = used.iter().map(|r| r.theta[idx] - theta0[idx]).collect();
            let m = moments(&errors);
            let ase = if used.is_empty() {
                f64::NAN
            } else {
                used.iter().map(|r| r.std_errors[idx]).sum::<f64>() / used.len() as f64
            };
            let cp = if used.is_empty() {
                f64::NAN
            } else {
                used.iter().filter(|r| r.covered[idx]).count() as f64 / used.len() as f64
            };
            rows.push(CoefficientMetrics {
                group: g + 1,
                coefficient: c,
                rmse: m.rmse,
                ese: m.ese,
                ase,
                bias: m.bias,
                cp,
            });
        }
    }

    let rmse_ratio = (design.compare_heterogeneous && !used.is_empty()).then(|| {
        let beta0 = design.true_beta();
        let n_src = truth.n_sources();
        (0..q)
            .map(|c| {
                let mut het = 0.0;
                let mut fused = 0.0;
                for s in 0..n_src {
                    let i = s * q + c;
                    let het_err: Vec<f64> = used
                        .iter()
                        .map(|r| r.heterogeneous.as_ref().expect("requested")[i] - beta0[i])
                        .collect();
                    let g = truth.group_of(s);
                    let fused_err: Vec<f64> =
                        used.iter().map(|r| r.theta[g * q + c] - beta0[i]).collect();
                    het += moments(&het_err).rmse;
                    fused += moments(&fused_err).rmse;
                }
                het / fused
            })
            .collect()
    });

    MetricsTable {
        setting: design.name.clone(),
        n_used: used.len(),
        rows,
        recovery_rate: if ok.is_empty() {
            0.0
        } else {
            used.len() as f64 / ok.len() as f64
        },
        mean_groups: if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| r.n_groups as f64).sum::<f64>() / ok.len() as f64
        },
        rmse_ratio,
        n_failed: replicates.len() - ok.len(),
    }
}

/// Outcome of checking a metrics table against the design's gate.
pub fn gate_failures(design: &SimDesign, metrics: &MetricsTable) -> Vec<String> {
    let mut out = Vec::new();
    let gate = &design.gate;
    if let Some(min) = gate.min_recovery {
        if metrics.recovery_rate < min {
            out.push(format!("recovery {} below {min}", metrics.recovery_rate));
        }
    }
    if let Some((lo, hi)) = gate.coverage_range {
        for r in &metrics.rows {
            if !(r.cp >= lo && r.cp <= hi) {
                out.push(format!(
                    "coverage {} of group {} coefficient {} outside [{lo}, {hi}]",
                    r.cp, r.group, r.coefficient
                ));
            }
        }
    }
    if let Some(max) = gate.max_bias_to_ese {
        for r in &metrics.rows {
            if !(r.bias.abs() <= max * r.ese) {
                out.push(format!(
                    "|bias| {} exceeds {max} x ESE {} for group {} coefficient {}",
                    r.bias.abs(),
                    r.ese,
                    r.group,
                    r.coefficient
                ));
            }
        }
    }
    if let Some(min) = gate.min_rmse_ratio {
        match &metrics.rmse_ratio {
            Some(ratios) => {
                for (c, r) in ratios.iter().enumerate() {
                    if !(*r >= min) {
                        out.push(format!("RMSE ratio {r} for coefficient {c} below {min}"));
                    }
                }
            }
            None => out.push("RMSE ratio requested but heterogeneous comparison is off".into()),
        }
    }
    out
}

pub fn covariate_name(c: usize) -> String {
    if c == 0 {
        "Intercept".to_string()
    } else {
        format!("X{c}")
    }
}

/// Writes the `Setting,group,covariate,RMSE,ESE,ASE,BIAS,CP` table.
pub fn write_metrics<W: Write>(metrics: &MetricsTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["Setting", "group", "covariate", "RMSE", "ESE", "ASE", "BIAS", "CP"])?;
    for r in &metrics.rows {
        w.write_record([
            metrics.setting.clone(),
            r.group.to_string(),
            covariate_name(r.coefficient),
            r.rmse.to_string(),
            r.ese.to_string(),
            r.ase.to_string(),
            r.bias.to_string(),
            r.cp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per replicate; vectors are `;`-joined.
pub fn write_replicates<W: Write>(records: &[ReplicateRecord], out: W) -> Result<()> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "replicate",
        "lambda",
        "n_groups",
        "recovered",
        "partition",
        "theta",
        "std_errors",
        "oracle_rel_diff",
        "error",
    ])?;
    for r in records {
        w.write_record([
            r.replicate.to_string(),
            r.lambda.to_string(),
            r.n_groups.to_string(),
            r.recovered.to_string(),
            r.partition.clone(),
            join(&r.theta),
            join(&r.std_errors),
            r.oracle_rel_diff.map(|d| d.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
