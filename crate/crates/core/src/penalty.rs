//! Pairwise model-fusion penalty: MCP applied to the L1 norm of whole
//! coefficient-vector differences, and its proximal map.

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};

/// MCP tuning (`lambda`, concavity `delta`) together with the ADMM step `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub delta: f64,
    pub rho: f64,
}

impl PenaltyConfig {
    pub fn new(lambda: f64, delta: f64, rho: f64) -> Result<Self> {
        let c = Self { lambda, delta, rho };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(FusionError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.delta > 1.0) {
            return Err(FusionError::Config(format!("delta must exceed 1, got {}", self.delta)));
        }
        if !(self.rho > 0.0) {
            return Err(FusionError::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.delta * self.rho > 1.0) {
            return Err(FusionError::Config(format!(
                "delta * rho must exceed 1, got {} * {}",
                self.delta, self.rho
            )));
        }
        Ok(())
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }
}

/// The minimax concave penalty evaluated at `t >= 0`.
pub fn mcp(t: f64, config: &PenaltyConfig) -> f64 {
    let lambda = config.lambda;
    if lambda == 0.0 {
        return 0.0;
    }
    let t = t.abs();
    let knot = config.delta * lambda;
    if t >= knot {
        0.5 * config.delta * lambda * lambda
    } else {
        lambda * t - t * t / (2.0 * config.delta)
    }
}

/// Unordered source pairs of the J x K grid, each stored as `(a, b)` with
/// `a < b` in source-index order. Within a study this is `j < j'`; across
/// studies the source from the earlier study comes first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
    n_sources: usize,
}

impl PairSet {
    pub fn new(n_outcomes: usize, n_studies: usize) -> Self {
        let n = n_outcomes * n_studies;
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for a in 0..n {
            for b in (a + 1)..n {
                pairs.push((a, b));
            }
        }
        Self {
            pairs,
            n_sources: n,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Sum over all pairs of the MCP of the L1 coefficient difference.
pub fn penalty_total(beta: &[f64], q: usize, pairs: &PairSet, config: &PenaltyConfig) -> f64 {
    pairs
        .iter()
        .map(|(a, b)| {
            let d: f64 = (0..q)
                .map(|r| (beta[a * q + r] - beta[b * q + r]).abs())
                .sum();
            mcp(d, config)
        })
        .sum()
}

/// Objective of the proximal subproblem, `p(|gamma|_1) + rho/2 |gamma - zeta|^2`.
pub fn prox_objective(gamma: &[f64], zeta: &[f64], config: &PenaltyConfig) -> f64 {
    let quad: f64 = gamma
        .iter()
        .zip(zeta)
        .map(|(g, z)| (g - z) * (g - z))
        .sum();
    mcp(l1(gamma), config) + 0.5 * config.rho * quad
}

const CD_MAX_ITER: usize = 100;
const CD_TOL: f64 = 1e-10;

/// Cyclic coordinate descent on the quadratic branch of the penalty, with
/// signs fixed to those of `zeta`. Returns magnitudes.
fn interior_descent(abs_zeta: &[f64], config: &PenaltyConfig) -> Vec<f64> {
    let PenaltyConfig { lambda, delta, rho } = *config;
    let curvature = rho - 1.0 / delta;
    let q = abs_zeta.len();
    let mut g = vec![0.0; q];
    for _ in 0..CD_MAX_ITER {
        let mut change = 0.0_f64;
        for r in 0..q {
            let others: f64 = g.iter().sum::<f64>() - g[r];
            let next = ((rho * abs_zeta[r] - lambda + others / delta) / curvature).max(0.0);
            change = change.max((next - g[r]).abs());
            g[r] = next;
        }
        if change <= CD_TOL {
            break;
        }
    }
    g
}

/// Exact minimizer over the region `|gamma|_1 <= min(delta*lambda, |zeta|_1)`.
///
/// For a fixed L1 radius `s` the best magnitudes are the Euclidean projection
/// of `|zeta|` onto the simplex of radius `s`, `g_r = (|zeta_r| - tau)_+`.
/// Between consecutive breakpoints of `tau` the profile objective is a scalar
/// quadratic in `s`, so the minimum is found by checking each piece's
/// endpoints and stationary point.
fn profile_minimizer(abs_zeta: &[f64], config: &PenaltyConfig) -> Vec<f64> {
    let PenaltyConfig { lambda, delta, rho } = *config;
    let q = abs_zeta.len();
    let mut sorted: Vec<f64> = abs_zeta.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let total = l1(abs_zeta);
    let s_max = (delta * lambda).min(total);

    let magnitudes = |s: f64| -> Vec<f64> {
        // tau such that sum (|z| - tau)_+ = s, for 0 <= s <= total.
        let mut prefix = 0.0;
        let mut tau = 0.0;
        for a in 1..=q {
            prefix += sorted[a - 1];
            let t = (prefix - s) / a as f64;
            let next = if a < q { sorted[a] } else { f64::NEG_INFINITY };
            if t >= next {
                tau = t.max(0.0);
                break;
            }
        }
        abs_zeta.iter().map(|z| (z - tau).max(0.0)).collect()
    };
    let value = |s: f64| -> f64 {
        let g = magnitudes(s);
        let quad: f64 = g.iter().zip(abs_zeta).map(|(g, z)| (g - z) * (g - z)).sum();
        lambda * s - s * s / (2.0 * delta) + 0.5 * rho * quad
    };

    // Breakpoints in s where the active set changes: s_a = sum_{top a} z - a z_(a+1).
    let mut knots = vec![0.0, s_max];
    let mut prefix = 0.0;
    for a in 1..=q {
        prefix += sorted[a - 1];
        let next = if a < q { sorted[a] } else { 0.0 };
        let s_a = prefix - a as f64 * next;
        if s_a > 0.0 && s_a < s_max {
            knots.push(s_a);
        }
    }
    knots.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    knots.dedup();

    let mut candidates = knots.clone();
    for w in knots.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        // Active count on this piece, from the midpoint.
        let mid = 0.5 * (lo + hi);
        let g = magnitudes(mid);
        let active: Vec<usize> = (0..q).filter(|&r| g[r] > 0.0).collect();
        let a = active.len() as f64;
        if a == 0.0 {
            continue;
        }
        let z_a: f64 = active.iter().map(|&r| abs_zeta[r]).sum();
        // f(s) = lambda s - s^2/(2 delta) + rho/(2a) (z_a - s)^2 + const
        let curv = rho / a - 1.0 / delta;
        if curv > 0.0 {
            let s_star = (rho * z_a / a - lambda) / curv;
            if s_star > lo && s_star < hi {
                candidates.push(s_star);
            }
        }
    }

    let mut best_s = 0.0;
    let mut best_v = value(0.0);
    for s in candidates {
        let v = value(s);
        if v < best_v {
            best_v = v;
            best_s = s;
        }
    }
    magnitudes(best_s)
}

fn with_signs(magnitudes: &[f64], zeta: &[f64]) -> Vec<f64> {
    magnitudes
        .iter()
        .zip(zeta)
        .map(|(&g, &z)| if g == 0.0 { 0.0 } else { g.copysign(z) })
        .collect()
}

/// `argmin_gamma p_delta(|gamma|_1; lambda) + rho/2 |gamma - zeta|^2`.
///
/// Candidates: zero, the coordinate-descent point on the quadratic branch,
/// the exact profile minimizer over the quadratic branch, and `zeta` itself
/// when it lies on the flat branch. The best objective wins; near-ties go to
/// the candidate with fewer nonzeros.
pub fn gamma_prox(zeta: &[f64], config: &PenaltyConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if config.lambda == 0.0 {
        return Ok(zeta.to_vec());
    }
    if zeta.iter().any(|z| !z.is_finite()) {
        return Err(FusionError::InvalidInput("non-finite prox argument".into()));
    }
    let abs_zeta: Vec<f64> = zeta.iter().map(|z| z.abs()).collect();
    let mut candidates: Vec<Vec<f64>> = vec![vec![0.0; zeta.len()]];
    candidates.push(with_signs(&interior_descent(&abs_zeta, config), zeta));
    candidates.push(with_signs(&profile_minimizer(&abs_zeta, config), zeta));
    if l1(zeta) >= config.delta * config.lambda {
        candidates.push(zeta.to_vec());
    }

    let nnz = |g: &[f64]| g.iter().filter(|x| **x != 0.0).count();
    let mut best = candidates[0].clone();
    let mut best_v = prox_objective(&best, zeta, config);
    for c in candidates.into_iter().skip(1) {
        let v = prox_objective(&c, zeta, config);
        let tie = 1e-13 * (1.0 + best_v.abs());
        if v < best_v - tie || (v <= best_v + tie && nnz(&c) < nnz(&best)) {
            best_v = v;
            best = c;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lambda: f64, delta: f64, rho: f64) -> PenaltyConfig {
        PenaltyConfig::new(lambda, delta, rho).unwrap()
    }

    #[test]
    fn mcp_closed_form() {
        let c = cfg(1.0, 3.0, 1.0);
        assert_eq!(mcp(0.0, &c), 0.0);
        assert!((mcp(5.0, &c) - 1.5).abs() < 1e-15);
        assert!((mcp(3.0, &c) - 1.5).abs() < 1e-15);
        assert_eq!(mcp(2.0, &cfg(0.0, 3.0, 1.0)), 0.0);
    }

    #[test]
    fn mcp_matches_quadrature_of_its_integral() {
        // Composite Simpson on lambda * (1 - x/(delta lambda))_+.
        let c = cfg(1.0, 3.0, 1.0);
        let integrand = |x: f64| c.lambda * (1.0 - x / (c.delta * c.lambda)).max(0.0);
        for &t in &[0.3, 1.0, 2.9, 4.0] {
            let n = 2000;
            let h = t / n as f64;
            let mut acc = integrand(0.0) + integrand(t);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * integrand(i as f64 * h);
            }
            let quad = acc * h / 3.0;
            assert!((mcp(t, &c) - quad).abs() < 1e-6, "t={t}");
        }
        assert!((mcp(1.0, &c) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_small_delta_rho() {
        assert!(PenaltyConfig::new(1.0, 3.0, 0.3).is_err());
        assert!(PenaltyConfig::new(1.0, 0.9, 5.0).is_err());
        assert!(PenaltyConfig::new(-1.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn pair_set_counts() {
        for (j, k) in [(1, 1), (4, 1), (4, 2), (10, 2), (3, 3)] {
            let p = PairSet::new(j, k);
            let n = j * k;
            assert_eq!(p.len(), n * (n - 1) / 2);
            assert_eq!(p.len(), k * j * (j - 1) / 2 + k * (k - 1) / 2 * j * j);
            let mut seen = std::collections::HashSet::new();
            for (a, b) in p.iter() {
                assert!(a < b);
                assert!(seen.insert((a, b)));
            }
        }
    }

    #[test]
    fn penalty_total_cases() {
        let c = cfg(1.0, 3.0, 1.0);
        let pairs = PairSet::new(3, 1);
        assert_eq!(penalty_total(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2, &pairs, &c), 0.0);
        // Only source 2 differs from 0 and 1, each by L1 = 4 > delta*lambda.
        let v = penalty_total(&[1.0, 2.0, 1.0, 2.0, 5.0, 2.0], 2, &pairs, &c);
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn prox_trivial_regimes() {
        let c = cfg(1.0, 3.0, 1.0);
        assert_eq!(gamma_prox(&[0.0, 0.0], &c).unwrap(), vec![0.0, 0.0]);
        assert_eq!(gamma_prox(&[10.0, 10.0], &c).unwrap(), vec![10.0, 10.0]);
        let z = [0.3, -2.0, 1.0];
        assert_eq!(gamma_prox(&z, &cfg(0.0, 3.0, 1.0)).unwrap(), z.to_vec());
        // Inside the lambda/rho box the subgradient at zero absorbs zeta.
        assert_eq!(gamma_prox(&[0.5, 0.3], &c).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn prox_is_odd() {
        let c = cfg(0.7, 2.0, 1.3);
        let z = [1.1, -0.4, 2.3];
        let p = gamma_prox(&z, &c).unwrap();
        let neg: Vec<f64> = z.iter().map(|x| -x).collect();
        let pn = gamma_prox(&neg, &c).unwrap();
        for (a, b) in p.iter().zip(&pn) {
            assert_eq!(*a, -*b);
        }
    }
}
