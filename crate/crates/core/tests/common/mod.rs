#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use qif_fusion::sim::{gen_dataset, SimDesign};
use qif_fusion::{BasisKind, LinkFamily, SourceBlock, StackedSystem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const LINKS: [LinkFamily; 3] = [
    LinkFamily::IdentityGaussian,
    LinkFamily::LogitBernoulli,
    LinkFamily::LogPoisson,
];

pub fn random_basis(rng: &mut ChaCha8Rng, m: usize) -> BasisKind {
    match rng.random_range(0..3) {
        0 => BasisKind::Independence,
        1 if m >= 2 => BasisKind::Exchangeable,
        _ if m >= 2 => BasisKind::ArBand(rng.random_range(1..m)),
        _ => BasisKind::Independence,
    }
}

/// A source block with an intercept, standard normal covariates and
/// responses drawn independently from the family at `beta`.
pub fn random_block(
    rng: &mut ChaCha8Rng,
    link: LinkFamily,
    basis: BasisKind,
    m: usize,
    q: usize,
    n: usize,
    beta: &[f64],
) -> SourceBlock {
    let mut x = Vec::with_capacity(n * m * q);
    let mut y = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        let mut row = vec![1.0];
        for _ in 1..q {
            row.push(0.5 * rng.sample::<f64, _>(StandardNormal));
        }
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let v = match link {
            LinkFamily::IdentityGaussian => eta + rng.sample::<f64, _>(StandardNormal),
            LinkFamily::LogitBernoulli => {
                let p = 1.0 / (1.0 + (-eta).exp());
                f64::from(u8::from(rng.random::<f64>() < p))
            }
            LinkFamily::LogPoisson => {
                let mu = eta.exp();
                let mut k = 0.0;
                let mut acc = rng.random::<f64>();
                let limit = (-mu).exp();
                while acc > limit {
                    acc *= rng.random::<f64>();
                    k += 1.0;
                }
                k
            }
        };
        x.extend(row);
        y.push(v);
    }
    SourceBlock::new(0, 0, m, q, y, x, basis, link).expect("valid block")
}

/// Dense basis matrices built from their definitions.
pub fn basis_matrices(kind: BasisKind, m: usize) -> Vec<DMatrix<f64>> {
    let mut out = vec![DMatrix::identity(m, m)];
    match kind {
        BasisKind::Independence => {}
        BasisKind::Exchangeable => {
            out.push(DMatrix::from_element(m, m, 1.0) - DMatrix::identity(m, m))
        }
        BasisKind::ArBand(d) => {
            for t in 1..=d {
                out.push(DMatrix::from_fn(m, m, |i, j| {
                    if i.abs_diff(j) == t {
                        1.0
                    } else {
                        0.0
                    }
                }));
            }
        }
    }
    out
}

fn mean_var(link: LinkFamily, eta: f64) -> (f64, f64, f64) {
    match link {
        LinkFamily::IdentityGaussian => (eta, 1.0, 1.0),
        LinkFamily::LogitBernoulli => {
            let p = 1.0 / (1.0 + (-eta).exp());
            (p, p * (1.0 - p), p * (1.0 - p))
        }
        LinkFamily::LogPoisson => {
            let mu = eta.exp();
            (mu, mu, mu)
        }
    }
}

/// Mean over participants of `X' D(mu_dot) V^{-1/2} B_t V^{-1/2} (y - mu)`
/// with dense matrices.
pub fn naive_psi(block: &SourceBlock, beta: &[f64]) -> DVector<f64> {
    let (m, q, n) = (block.m(), block.q(), block.n());
    let bases = basis_matrices(block.basis().kind(), m);
    let mut total = DVector::zeros(q * bases.len());
    for i in 0..n {
        let x = DMatrix::from_row_slice(m, q, block.design(i));
        let eta = &x * DVector::from_column_slice(beta);
        let mut mu = DVector::zeros(m);
        let mut dmu = DMatrix::zeros(m, m);
        let mut vinv_half = DMatrix::zeros(m, m);
        for r in 0..m {
            let (h, h1, v) = mean_var(block.link(), eta[r]);
            mu[r] = h;
            dmu[(r, r)] = h1;
            vinv_half[(r, r)] = 1.0 / v.sqrt();
        }
        let resid = DVector::from_column_slice(block.responses(i)) - mu;
        for (t, b) in bases.iter().enumerate() {
            let part = x.transpose() * &dmu * &vinv_half * b * &vinv_half * &resid;
            let mut rows = total.rows_mut(t * q, q);
            rows += part;
        }
    }
    total / n as f64
}

/// Central differences of `f` at `x` with step `h`, columns per coordinate.
pub fn central_jacobian<F>(f: F, x: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> DVector<f64>,
{
    let f0 = f(x);
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for c in 0..x.len() {
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[c] += h;
        dn[c] -= h;
        let col = (f(&up) - f(&dn)) / (2.0 * h);
        jac.set_column(c, &col);
    }
    jac
}

pub fn rel_sup_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

/// `p(t) = lambda t - t^2/(2 delta)` below `delta lambda`, flat above.
pub fn mcp_ref(t: f64, lambda: f64, delta: f64) -> f64 {
    if t < delta * lambda {
        lambda * t - t * t / (2.0 * delta)
    } else {
        delta * lambda * lambda / 2.0
    }
}

pub fn prox_obj_ref(g: &[f64], z: &[f64], lambda: f64, delta: f64, rho: f64) -> f64 {
    let l1: f64 = g.iter().map(|v| v.abs()).sum();
    let sq: f64 = g.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    mcp_ref(l1, lambda, delta) + 0.5 * rho * sq
}

/// Brute-force minimizer of the prox objective: a coarse grid over the box
/// spanned by 0 and `zeta` (coordinatewise projection onto that box never
/// increases the objective), then repeated local grids around the best
/// few points until the spacing falls below `resolution`.
pub fn prox_grid_oracle(z: &[f64], lambda: f64, delta: f64, rho: f64, resolution: f64) -> (Vec<f64>, f64) {
    let q = z.len();
    let lo: Vec<f64> = z.iter().map(|v| v.min(0.0)).collect();
    let hi: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
    let coarse = 48usize;
    let obj = |g: &[f64]| prox_obj_ref(g, z, lambda, delta, rho);

    let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut idx = vec![0usize; q];
    loop {
        let g: Vec<f64> = (0..q)
            .map(|r| lo[r] + (hi[r] - lo[r]) * idx[r] as f64 / coarse as f64)
            .collect();
        pts.push((obj(&g), g));
        let mut c = 0;
        while c < q {
            idx[c] += 1;
            if idx[c] <= coarse {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
        if c == q {
            break;
        }
    }
    // Exact corner candidates.
    pts.push((obj(z), z.to_vec()));
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pts.truncate(6);

    let mut best = pts[0].clone();
    for (_, start) in pts {
        let mut centre = start;
        let mut step: Vec<f64> = (0..q).map(|r| ((hi[r] - lo[r]) / coarse as f64).max(1e-12)).collect();
        let mut val = obj(&centre);
        while step.iter().cloned().fold(0.0, f64::max) > resolution * 1e-3 {
            let mut local_best = (val, centre.clone());
            let mut idx = vec![0usize; q];
            loop {
                let g: Vec<f64> = (0..q)
                    .map(|r| {
                        (centre[r] + step[r] * (idx[r] as f64 - 5.0) / 2.5).clamp(lo[r], hi[r])
                    })
                    .collect();
                let v = obj(&g);
                if v < local_best.0 {
                    local_best = (v, g);
                }
                let mut c = 0;
                while c < q {
                    idx[c] += 1;
                    if idx[c] <= 10 {
                        break;
                    }
                    idx[c] = 0;
                    c += 1;
                }
                if c == q {
                    break;
                }
            }
            if local_best.1 == centre {
                for s in step.iter_mut() {
                    *s *= 0.25;
                }
            }
            centre = local_best.1;
            val = local_best.0;
        }
        if val < best.0 {
            best = (val, centre);
        }
    }
    (best.1, best.0)
}

pub fn design(text: &str) -> SimDesign {
    SimDesign::from_toml(text).expect("valid design")
}

pub const SMALL_LOGISTIC: &str = r#"
name = "small-logistic"
link = "logit-bernoulli"
m = [5, 5, 5]
n = [250, 250]
partition = [[0, 0, 1], [0, 1, 1]]
theta = [[0.5, 1.0], [-1.0, -0.5]]
lambdas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]
replicates = 3
seed = 42

[admm]
rho = 2.0
"#;

pub const SMALL_POISSON: &str = r#"
name = "small-poisson"
link = "log-poisson"
m = [5, 5, 5]
n = [300]
partition = [[0, 0, 0]]
theta = [[0.1, -0.3]]
lambdas = [0.05, 0.1, 0.2, 0.3, 0.4]
replicates = 4
seed = 17
compare_heterogeneous = true
compare_oracle = true

[admm]
rho = 2.0
"#;

pub fn small_system(text: &str, replicate: usize) -> StackedSystem {
    StackedSystem::new(gen_dataset(&design(text), replicate).unwrap()).unwrap()
}

/// Copy of `block` labelled as study `k`, source `j`.
pub fn relabel(block: &SourceBlock, k: usize, j: usize) -> SourceBlock {
    let (m, q) = (block.m(), block.q());
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..block.n() {
        x.extend_from_slice(block.design(i));
        y.extend_from_slice(block.responses(i));
    }
    SourceBlock::new(k, j, m, q, y, x, block.basis().kind(), block.link()).unwrap()
}

/// Asymptotic Kolmogorov critical value of `sqrt(n) D` at size 0.01.
pub const KS_001: f64 = 1.6276;

/// Kolmogorov-Smirnov distance of a sample from the standard normal.
pub fn ks_statistic(mut xs: Vec<f64>) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let norm = Normal::standard();
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = norm.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn column(draws: &[Vec<f64>], c: usize) -> Vec<f64> {
    draws.iter().map(|z| z[c]).collect()
}

/// Two-sided exact binomial p-value of `k` successes in `n` trials.
pub fn binomial_pvalue(k: u64, n: u64, p: f64) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let bin = Binomial::new(p, n).unwrap();
    let lower = bin.cdf(k);
    let upper = 1.0 - if k == 0 { 0.0 } else { bin.cdf(k - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// Pearson chi-square statistic and its 0.99 critical value for counts
/// against Poisson(mu), pooling the upper tail so every bin expects >= 5.
pub fn poisson_chi_square(ys: &[f64], mu: f64) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson};
    let n = ys.len() as f64;
    let pois = Poisson::new(mu).unwrap();
    let mut top = 0u64;
    while n * (1.0 - pois.cdf(top)) >= 5.0 {
        top += 1;
    }
    let mut observed = vec![0.0; top as usize + 1];
    for y in ys {
        observed[(*y as usize).min(top as usize)] += 1.0;
    }
    let mut stat = 0.0;
    for (b, o) in observed.iter().enumerate() {
        let p = if b as u64 == top {
            1.0 - pois.cdf(top - 1)
        } else {
            pois.pmf(b as u64)
        };
        let e = n * p;
        stat += (o - e) * (o - e) / e;
    }
    (stat, ChiSquared::new(top as f64).unwrap().inverse_cdf(0.99))
}
