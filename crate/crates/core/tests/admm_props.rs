mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::*;
use qif_fusion::admm::representative_beta;
use qif_fusion::linalg::{pinv_sym, PINV_CUTOFF};
use qif_fusion::selection::{initial_qif_fits, suggest_lambda_max};
use qif_fusion::{
    admm_solve, extract_partition, AdmmConfig, AdmmSolver, PairSet, PartitionMap, PenaltyConfig,
    SolverState,
};

fn admm(rho: f64) -> AdmmConfig {
    AdmmConfig {
        rho,
        ..AdmmConfig::default()
    }
}

#[test]
fn multiplier_identity_every_iteration() {
    let system = small_system(SMALL_LOGISTIC, 0);
    let pairs = PairSet::new(3, 2);
    let init = initial_qif_fits(&system).unwrap();
    let rho = 2.0;
    let mut solver =
        AdmmSolver::new(&system, &pairs, PenaltyConfig::new(0.3, 3.0, rho).unwrap(), admm(rho), &init).unwrap();
    for _ in 0..40 {
        let before = solver.state().multipliers.clone();
        let report = solver.step().unwrap();
        let s = solver.state();
        for (p, (a, b)) in pairs.iter().enumerate() {
            for r in 0..2 {
                let res = (s.beta[a * 2 + r] - s.beta[b * 2 + r]) - s.gamma[p][r];
                assert_eq!(s.multipliers[p][r], before[p][r] + rho * res, "pair {p} coord {r}");
            }
        }
        assert!(report.merit_after <= report.merit_before);
        if report.converged {
            break;
        }
    }
}

#[test]
fn zero_lambda_gives_singletons_and_stationarity() {
    let system = small_system(SMALL_LOGISTIC, 1);
    let pairs = PairSet::new(3, 2);
    let init = initial_qif_fits(&system).unwrap();
    let state = admm_solve(&system, &pairs, PenaltyConfig::new(0.0, 3.0, 1.0).unwrap(), admm(1.0), &init).unwrap();
    assert!(state.converged);
    assert_eq!(extract_partition(&state, &pairs, 0.0), PartitionMap::singletons(6));
    for (p, (a, b)) in pairs.iter().enumerate() {
        for r in 0..2 {
            let d = state.beta[a * 2 + r] - state.beta[b * 2 + r];
            assert!((state.gamma[p][r] - d).abs() <= 1e-5);
        }
    }
    let ev = system.evaluate(&state.beta, true).unwrap();
    let (w, _) = pinv_sym(&ev.covariance, PINV_CUTOFF);
    let g = ev.sensitivity.unwrap().transpose() * (w * &ev.psi.mean);
    assert!(g.amax() <= 1e-4, "{}", g.amax());
}

#[test]
fn large_lambda_fuses_everything() {
    let system = small_system(SMALL_LOGISTIC, 2);
    let pairs = PairSet::new(3, 2);
    let init = initial_qif_fits(&system).unwrap();
    let lambda = 3.0 * suggest_lambda_max(&init, 2, &pairs);
    let state = admm_solve(&system, &pairs, PenaltyConfig::new(lambda, 3.0, 2.0).unwrap(), admm(2.0), &init).unwrap();
    assert!(state.gamma.iter().flatten().all(|g| *g == 0.0));
    assert_eq!(extract_partition(&state, &pairs, 0.0).n_groups(), 1);
}

#[test]
fn solve_is_deterministic() {
    let system = small_system(SMALL_POISSON, 0);
    let pairs = PairSet::new(3, 1);
    let init = initial_qif_fits(&system).unwrap();
    let cfg = PenaltyConfig::new(0.1, 3.0, 2.0).unwrap();
    let a = admm_solve(&system, &pairs, cfg, admm(2.0), &init).unwrap();
    let b = admm_solve(&system, &pairs, cfg, admm(2.0), &init).unwrap();
    assert_eq!(a.beta, b.beta);
    assert_eq!(a.gamma, b.gamma);
    assert_eq!(a.iteration, b.iteration);
}

#[test]
fn configuration_errors() {
    let system = small_system(SMALL_POISSON, 0);
    let pairs = PairSet::new(3, 1);
    let init = vec![0.0; 6];
    let bad = PenaltyConfig { lambda: 0.1, delta: 1.5, rho: 0.5 };
    assert!(admm_solve(&system, &pairs, bad, admm(0.5), &init).is_err());
    assert!(admm_solve(&system, &pairs, PenaltyConfig::new(0.1, 3.0, 1.0).unwrap(), admm(1.0), &init[..4]).is_err());
}

fn state(gamma: Vec<Vec<f64>>, beta: Vec<f64>) -> SolverState {
    SolverState {
        beta,
        multipliers: vec![],
        gamma,
        frozen_covariance: DMatrix::zeros(0, 0),
        primal_residual: 0.0,
        dual_residual: 0.0,
        iteration: 0,
        converged: true,
        trace: vec![],
    }
}

#[test]
fn representative_examples() {
    let pairs = PairSet::new(3, 1);
    let s = state(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]], vec![1.0, 0.0, 0.0, 1.0, 4.0, 4.0]);
    let p = extract_partition(&s, &pairs, 0.0);
    assert_eq!(p.n_groups(), 2);
    assert_eq!(representative_beta(&s, &p, 2), vec![vec![0.5, 0.5], vec![4.0, 4.0]]);
    let single = PartitionMap::singletons(3);
    assert_eq!(representative_beta(&s, &single, 2)[2], vec![4.0, 4.0]);
}

/// Connected components by repeated relabelling to the minimum neighbour.
fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &(a, b) in edges {
            let m = label[a].min(label[b]);
            if label[a] != m || label[b] != m {
                label[a] = m;
                label[b] = m;
                changed = true;
            }
        }
        if !changed {
            return label;
        }
    }
}

proptest! {
    #[test]
    fn extracted_partition_is_closure(
        j in 1usize..4,
        k in 1usize..4,
        seed in any::<u64>(),
        density in 0.0f64..1.0,
    ) {
        let pairs = PairSet::new(j, k);
        let n = j * k;
        let mut rng = rng(seed);
        use rand::Rng;
        let mut fused = Vec::new();
        let gamma: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(a, b)| {
                if rng.random::<f64>() < density {
                    fused.push((a, b));
                    vec![0.0, 0.0]
                } else {
                    vec![rng.random_range(0.1..1.0), 0.0]
                }
            })
            .collect();
        let p = extract_partition(&state(gamma, vec![]), &pairs, 0.0);
        prop_assert_eq!(p.n_sources(), n);
        let groups = p.groups();
        let mut seen = vec![false; n];
        for g in &groups {
            prop_assert!(!g.is_empty());
            for &s in g {
                prop_assert!(!seen[s]);
                seen[s] = true;
            }
        }
        prop_assert!(seen.iter().all(|x| *x));
        prop_assert_eq!(p, PartitionMap::from_labels(&components(n, &fused)));
    }
}
