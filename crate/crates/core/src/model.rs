//! Per-source mean models and quadratic inference functions.
//!
//! For participant `i` of a source block with design `X` (m x q) and response
//! `y`, each basis matrix `B_t` contributes the estimating-function block
//!
//! ```text
//! psi_t = mu_dot' D^{-1/2} B_t D^{-1/2} (y - mu),   mu_dot = diag(h'(X beta)) X
//! ```
//!
//! which is rewritten as `X' (a o B_t w)` with `a = h'(eta) v(mu)^{-1/2}` and
//! `w = (y - mu) v(mu)^{-1/2}`. Derivatives of `a` and `w` in the linear
//! predictor give the exact sensitivity matrix, residual terms included.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::gauss_newton::{self, GnOptions, MomentEval};

const MU_FLOOR: f64 = 1e-10;

/// Mean/variance family of a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkFamily {
    IdentityGaussian,
    LogitBernoulli,
    LogPoisson,
}

/// Per-coordinate quantities needed for psi and its derivative.
#[derive(Debug, Clone, Copy)]
struct Kernel {
    a: f64,
    a_eta: f64,
    w: f64,
    w_eta: f64,
}

impl LinkFamily {
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            LinkFamily::IdentityGaussian => eta,
            LinkFamily::LogitBernoulli => logistic(eta),
            LinkFamily::LogPoisson => eta.exp(),
        }
    }

    pub fn mean_deriv(self, eta: f64) -> f64 {
        match self {
            LinkFamily::IdentityGaussian => 1.0,
            LinkFamily::LogitBernoulli => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
            LinkFamily::LogPoisson => eta.exp(),
        }
    }

    /// Variance function with unit dispersion.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            LinkFamily::IdentityGaussian => 1.0,
            LinkFamily::LogitBernoulli => mu * (1.0 - mu),
            LinkFamily::LogPoisson => mu,
        }
    }

    fn variance_deriv(self, mu: f64) -> f64 {
        match self {
            LinkFamily::IdentityGaussian => 0.0,
            LinkFamily::LogitBernoulli => 1.0 - 2.0 * mu,
            LinkFamily::LogPoisson => 1.0,
        }
    }

    /// Clips a mean into the region where the variance is positive.
    /// The flag is false when clipping was active.
    fn clip(self, mu: f64) -> (f64, bool) {
        match self {
            LinkFamily::IdentityGaussian => (mu, true),
            LinkFamily::LogitBernoulli => {
                if mu < MU_FLOOR {
                    (MU_FLOOR, false)
                } else if mu > 1.0 - MU_FLOOR {
                    (1.0 - MU_FLOOR, false)
                } else {
                    (mu, true)
                }
            }
            LinkFamily::LogPoisson => {
                if mu < MU_FLOOR {
                    (MU_FLOOR, false)
                } else {
                    (mu, true)
                }
            }
        }
    }

    /// Whether `y` lies in the response support of the family.
    pub fn supports(self, y: f64) -> bool {
        match self {
            LinkFamily::IdentityGaussian => y.is_finite(),
            LinkFamily::LogitBernoulli => y == 0.0 || y == 1.0,
            LinkFamily::LogPoisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        }
    }

    /// `(h(eta), h'(eta), h''(eta))` with one transcendental evaluation.
    fn mean_derivs(self, eta: f64) -> (f64, f64, f64) {
        match self {
            LinkFamily::IdentityGaussian => (eta, 1.0, 0.0),
            LinkFamily::LogitBernoulli => {
                let p = logistic(eta);
                let h1 = p * (1.0 - p);
                (p, h1, h1 * (1.0 - 2.0 * p))
            }
            LinkFamily::LogPoisson => {
                let mu = eta.exp();
                (mu, mu, mu)
            }
        }
    }

    fn kernel(self, eta: f64, y: f64) -> Option<Kernel> {
        let (mu, h1, h2) = self.mean_derivs(eta);
        let (mu_c, active) = self.clip(mu);
        let v = self.variance(mu_c);
        if !(v > 0.0) || !v.is_finite() || !mu.is_finite() || !h1.is_finite() {
            return None;
        }
        let v_eta = if active {
            self.variance_deriv(mu_c) * h1
        } else {
            0.0
        };
        let d = v.sqrt().recip();
        let d_eta = -0.5 * d / v * v_eta;
        let e = y - mu;
        Some(Kernel {
            a: h1 * d,
            a_eta: h2 * d + h1 * d_eta,
            w: e * d,
            w_eta: -h1 * d + e * d_eta,
        })
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Working-correlation basis family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "order")]
pub enum BasisKind {
    Independence,
    Exchangeable,
    /// Banded basis approximating an AR(d) inverse correlation.
    ArBand(usize),
}

impl BasisKind {
    pub fn size(self) -> usize {
        match self {
            BasisKind::Independence => 1,
            BasisKind::Exchangeable => 2,
            BasisKind::ArBand(d) => d + 1,
        }
    }
}

/// The 0/1 basis matrices of one source, applied implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    kind: BasisKind,
    dim: usize,
}

impl BasisSet {
    pub fn new(kind: BasisKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(FusionError::InvalidInput("basis dimension must be positive".into()));
        }
        if let BasisKind::ArBand(d) = kind {
            if d == 0 || d >= dim {
                return Err(FusionError::InvalidInput(format!(
                    "ar-band order {d} must lie in 1..{dim}"
                )));
            }
        }
        Ok(Self { kind, dim })
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.kind.size()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `out = B_t v`.
    pub fn apply(&self, t: usize, v: &[f64], out: &mut [f64]) {
        let m = self.dim;
        if t == 0 {
            out.copy_from_slice(v);
            return;
        }
        match self.kind {
            BasisKind::Independence => unreachable!("independence basis has one matrix"),
            BasisKind::Exchangeable => {
                let total: f64 = v.iter().sum();
                for (o, x) in out.iter_mut().zip(v) {
                    *o = total - x;
                }
            }
            BasisKind::ArBand(_) => {
                for i in 0..m {
                    let mut acc = 0.0;
                    if i >= t {
                        acc += v[i - t];
                    }
                    if i + t < m {
                        acc += v[i + t];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// Dense form of basis matrix `t`.
    pub fn matrix(&self, t: usize) -> DMatrix<f64> {
        let m = self.dim;
        DMatrix::from_fn(m, m, |i, j| match (t, self.kind) {
            (0, _) => f64::from(u8::from(i == j)),
            (_, BasisKind::Exchangeable) => f64::from(u8::from(i != j)),
            (r, BasisKind::ArBand(_)) => f64::from(u8::from(i.abs_diff(j) == r)),
            _ => 0.0,
        })
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.len()).map(|t| self.matrix(t)).collect()
    }
}

/// One data source `(j, k)`: responses and designs of the participants of
/// study `k` on outcome block `j`.
#[derive(Debug, Clone)]
pub struct SourceBlock {
    pub study: usize,
    pub source: usize,
    n: usize,
    m: usize,
    q: usize,
    /// n x m, participant-major.
    y: Vec<f64>,
    /// n x m x q, participant then position then coefficient.
    x: Vec<f64>,
    /// The same design as an (n*m) x q column-major matrix.
    x_cols: DMatrix<f64>,
    basis: BasisSet,
    link: LinkFamily,
}

/// Per-participant estimating functions of one source.
#[derive(Debug, Clone)]
pub struct SourcePsi {
    /// (q*s) x n; column i is participant i.
    pub per_participant: DMatrix<f64>,
    pub mean: DVector<f64>,
}

impl SourceBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        study: usize,
        source: usize,
        m: usize,
        q: usize,
        y: Vec<f64>,
        x: Vec<f64>,
        basis: BasisKind,
        link: LinkFamily,
    ) -> Result<Self> {
        if m == 0 || q == 0 {
            return Err(FusionError::Dimension("m and q must be positive".into()));
        }
        if y.len() % m != 0 {
            return Err(FusionError::Dimension(format!(
                "response length {} is not a multiple of m = {m}",
                y.len()
            )));
        }
        let n = y.len() / m;
        if x.len() != n * m * q {
            return Err(FusionError::Dimension(format!(
                "design has {} entries, expected {}",
                x.len(),
                n * m * q
            )));
        }
        if q >= n {
            return Err(FusionError::Dimension(format!(
                "need q < n_k, got q = {q}, n = {n}"
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::InvalidInput(format!(
                "non-finite covariate for participant {}",
                pos / (m * q)
            )));
        }
        if let Some(pos) = y.iter().position(|&v| !link.supports(v)) {
            return Err(FusionError::InvalidInput(format!(
                "response {} of participant {} outside the support of {:?}",
                y[pos],
                pos / m,
                link
            )));
        }
        let basis = BasisSet::new(basis, m)?;
        let x_cols = DMatrix::from_row_slice(n * m, q, &x);
        Ok(Self {
            study,
            source,
            n,
            m,
            q,
            y,
            x,
            x_cols,
            basis,
            link,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn q(&self) -> usize {
        self.q
    }
    pub fn link(&self) -> LinkFamily {
        self.link
    }
    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }
    /// Length of one participant's psi vector, `q * s`.
    pub fn psi_dim(&self) -> usize {
        self.q * self.basis.len()
    }
    pub fn responses(&self, i: usize) -> &[f64] {
        &self.y[i * self.m..(i + 1) * self.m]
    }
    /// Design of participant `i`, row-major m x q.
    pub fn design(&self, i: usize) -> &[f64] {
        let s = self.m * self.q;
        &self.x[i * s..(i + 1) * s]
    }
    pub fn design_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.q, self.design(i))
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.q {
            return Err(FusionError::Dimension(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.q
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(FusionError::InvalidInput("non-finite beta".into()));
        }
        Ok(())
    }

    /// Per-participant estimating functions and their mean.
    pub fn psi(&self, beta: &[f64]) -> Result<SourcePsi> {
        let (psi, _) = self.evaluate(beta, false)?;
        Ok(psi)
    }

    /// Exact sensitivity `-dPsi/dbeta`, a (q*s) x q matrix.
    pub fn sensitivity(&self, beta: &[f64]) -> Result<DMatrix<f64>> {
        let (_, s) = self.evaluate(beta, true)?;
        Ok(s.expect("sensitivity requested"))
    }

    /// Estimating functions and, optionally, the sensitivity in one pass.
    pub fn evaluate(
        &self,
        beta: &[f64],
        with_sensitivity: bool,
    ) -> Result<(SourcePsi, Option<DMatrix<f64>>)> {
        self.check_beta(beta)?;
        let (m, q, s) = (self.m, self.q, self.basis.len());
        let dim = q * s;
        let mut per = DMatrix::zeros(dim, self.n);

        let mut a = vec![0.0; m];
        let mut a_eta = vec![0.0; m];
        let mut w = vec![0.0; m];
        let mut w_eta = vec![0.0; m];
        let mut bw = vec![0.0; m];
        let mut u_col = vec![0.0; m];
        let mut bu_col = vec![0.0; m];
        // Per basis matrix, rows c1_r x_r + a_r (B_t diag(w_eta) X)_r so that
        // the sensitivity block is X' R_t.
        let mut r_mats: Vec<DMatrix<f64>> = if with_sensitivity {
            (0..s).map(|_| DMatrix::zeros(self.n * m, q)).collect()
        } else {
            Vec::new()
        };

        for i in 0..self.n {
            let xi = self.design(i);
            let yi = self.responses(i);
            for r in 0..m {
                let row = &xi[r * q..(r + 1) * q];
                let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
                let k = self.link.kernel(eta, yi[r]).ok_or(FusionError::SingularVariance {
                    study: self.study,
                    source_index: self.source,
                    participant: i,
                    position: r,
                })?;
                a[r] = k.a;
                a_eta[r] = k.a_eta;
                w[r] = k.w;
                w_eta[r] = k.w_eta;
            }
            let col = per.column_mut(i);
            let col = col.data.into_slice_mut();
            for t in 0..s {
                self.basis.apply(t, &w, &mut bw);
                let out = &mut col[t * q..(t + 1) * q];
                for r in 0..m {
                    let c = a[r] * bw[r];
                    let row = &xi[r * q..(r + 1) * q];
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += c * x;
                    }
                }
                if let Some(rt) = r_mats.get_mut(t) {
                    let nm = self.n * m;
                    let data = rt.as_mut_slice();
                    for c in 0..q {
                        for r in 0..m {
                            u_col[r] = w_eta[r] * xi[r * q + c];
                        }
                        self.basis.apply(t, &u_col, &mut bu_col);
                        let dst = &mut data[c * nm + i * m..c * nm + (i + 1) * m];
                        for r in 0..m {
                            dst[r] = bw[r] * a_eta[r] * xi[r * q + c] + a[r] * bu_col[r];
                        }
                    }
                }
            }
        }
        let mut sens = with_sensitivity.then(|| {
            let mut full = DMatrix::zeros(dim, q);
            for (t, rt) in r_mats.iter().enumerate() {
                full.view_mut((t * q, 0), (q, q))
                    .copy_from(&(-self.x_cols.tr_mul(rt)));
            }
            full
        });

        let inv_n = 1.0 / self.n as f64;
        let mean = per.column_sum() * inv_n;
        if let Some(s) = sens.as_mut() {
            *s *= inv_n;
        }
        Ok((
            SourcePsi {
                per_participant: per,
                mean,
            },
            sens,
        ))
    }

    /// QIF objective `Psi' {sum_i psi_i psi_i'}^- Psi`.
    pub fn qif_objective(&self, beta: &[f64]) -> Result<f64> {
        let psi = self.psi(beta)?;
        let outer = &psi.per_participant * psi.per_participant.transpose();
        let (pinv, _) = crate::linalg::pinv_sym(&outer, crate::linalg::PINV_CUTOFF);
        Ok(psi.mean.dot(&(&pinv * &psi.mean)))
    }
}

/// Result of a per-source QIF fit.
#[derive(Debug, Clone)]
pub struct QifFit {
    pub beta: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Minimizes the QIF objective of one source by Gauss-Newton with the inner
/// weight refreshed at each accepted iterate.
pub fn qif_fit_source(block: &SourceBlock, beta0: &[f64]) -> Result<QifFit> {
    qif_fit_source_with(block, beta0, &GnOptions::default())
}

pub fn qif_fit_source_with(
    block: &SourceBlock,
    beta0: &[f64],
    opts: &GnOptions,
) -> Result<QifFit> {
    block.check_beta(beta0)?;
    let full = |theta: &DVector<f64>| -> Result<MomentEval> {
        let (psi, sens) = block.evaluate(theta.as_slice(), true)?;
        let cov = &psi.per_participant * psi.per_participant.transpose() / block.n as f64;
        Ok(MomentEval {
            psi: psi.mean,
            covariance: cov,
            sensitivity: sens.expect("requested"),
        })
    };
    let psi_only = |theta: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(block.psi(theta.as_slice())?.mean)
    };
    let out = gauss_newton::minimize(DVector::from_column_slice(beta0), full, psi_only, opts)?;
    let beta: Vec<f64> = out.theta.iter().cloned().collect();
    let objective = block.qif_objective(&beta)?;
    Ok(QifFit {
        beta,
        objective,
        iterations: out.iterations,
        grad_norm: out.grad_norm,
    })
}
