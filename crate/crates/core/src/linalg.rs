//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{FusionError, Result};

/// Relative eigenvalue cutoff for generalized inverses.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Absolute asymmetry (relative to the largest entry) tolerated in inputs
/// that are supposed to be symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(FusionError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(FusionError::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Moore-Penrose inverse of a symmetric PSD matrix via its eigendecomposition.
///
/// Eigenvalues at or below `rel_cutoff * max_eigenvalue` are treated as zero.
/// Returns the inverse and the retained rank.
pub fn pinv_sym(m: &DMatrix<f64>, rel_cutoff: f64) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max_ev <= 0.0 {
        return (DMatrix::zeros(n, n), 0);
    }
    let cutoff = rel_cutoff * max_ev;
    let mut scaled = eig.eigenvectors.clone();
    let mut rank = 0;
    for (c, &ev) in eig.eigenvalues.iter().enumerate() {
        let f = if ev > cutoff {
            rank += 1;
            1.0 / ev
        } else {
            0.0
        };
        scaled.column_mut(c).scale_mut(f);
    }
    (&scaled * eig.eigenvectors.transpose(), rank)
}

/// Solves `h x = b` for symmetric `h`, retrying with a ridge term when the
/// Cholesky factorization fails. Damping starts at 1e-8 (relative to the mean
/// diagonal) and doubles up to 1e-2.
pub fn solve_spd_damped(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Ok(ch.solve(b));
    }
    let n = h.nrows();
    let scale = (h.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut damping = 1e-8;
    while damping <= 1e-2 {
        let mut hd = h.clone();
        for i in 0..n {
            hd[(i, i)] += damping * scale;
        }
        if let Some(ch) = Cholesky::new(hd) {
            return Ok(ch.solve(b));
        }
        damping *= 2.0;
    }
    Err(FusionError::Singular(format!(
        "{n}x{n} Gauss-Newton system"
    )))
}

/// Inverse of a symmetric positive definite matrix, `None` when not PD.
pub fn inverse_spd(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(h.clone()).map(|ch| ch.inverse())
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_deficient_projects() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank) = pinv_sym(&v, PINV_CUTOFF);
        assert_eq!(rank, 1);
        for x in p.iter() {
            assert!((x - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_rejected() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(check_symmetric(&v).is_err());
    }

    #[test]
    fn damped_solve_handles_singular() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let x = solve_spd_damped(&h, &b).unwrap();
        assert!(((&h * &x) - &b).amax() < 1e-3);
    }
}
