//! Small dense linear-algebra helpers used throughout the crate.
//!
//! Everything here operates on symmetric matrices of modest dimension
//! (stacked moment blocks, weighting matrices, covariances), so plain
//! `nalgebra` factorizations are sufficient and keep results deterministic.

use nalgebra::{DMatrix, DVector};

use crate::error::{GmetaError, Result};

/// Force exact symmetry: (M + Mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev: Vec<f64> = symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    DVector::from_vec(ev)
}

/// PSD check used by invariants: min eigenvalue ≥ −tol_scale·|trace|.
pub fn is_psd(m: &DMatrix<f64>, tol_scale: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let ev = sym_eigenvalues(m);
    let tr = m.trace().abs().max(1e-300);
    ev[0] >= -tol_scale * tr
}

/// Solve M x = b for symmetric positive definite M via Cholesky, adding a
/// ridge of `ridge_eps·max(trace/dim, 1)` (escalated up to three times) when
/// the factorization fails.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>, ridge_eps: f64) -> Option<DVector<f64>> {
    let chol = spd_cholesky(m, ridge_eps)?;
    Some(chol.solve(b))
}

/// Invert a symmetric positive (semi-)definite matrix with the same ridge
/// policy as [`solve_spd`].
pub fn inv_spd(m: &DMatrix<f64>, ridge_eps: f64) -> Option<DMatrix<f64>> {
    let chol = spd_cholesky(m, ridge_eps)?;
    Some(symmetrize(&chol.inverse()))
}

fn spd_cholesky(m: &DMatrix<f64>, ridge_eps: f64) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let sym = symmetrize(m);
    if let Some(c) = sym.clone().cholesky() {
        return Some(c);
    }
    let n = m.nrows().max(1);
    let scale = (m.trace().abs() / n as f64).max(1.0);
    let mut ridge = ridge_eps * scale;
    for _ in 0..3 {
        let mut shifted = sym.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += ridge;
        }
        if let Some(c) = shifted.cholesky() {
            return Some(c);
        }
        ridge *= 10.0;
    }
    None
}

/// Condition number (λ_max/λ_min) of a symmetric matrix. Infinite when the
/// smallest eigenvalue is non-positive.
pub fn sym_condition_number(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let min = ev[0];
    let max = ev[ev.len() - 1];
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Symmetric square root R^{1/2} of a positive definite matrix via its
/// eigendecomposition. Used for correlated covariate generation.
pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 1e-12 {
        return Err(GmetaError::Correlation(format!(
            "smallest eigenvalue {min:.3e} is not positive"
        )));
    }
    let mut q = eig.eigenvectors.clone();
    for j in 0..q.ncols() {
        let s = eig.eigenvalues[j].sqrt();
        for i in 0..q.nrows() {
            q[(i, j)] *= s;
        }
    }
    Ok(&q * eig.eigenvectors.transpose())
}

/// Numerical rank: singular values above `rel_tol · σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Spectral (operator 2-) norm of a symmetric matrix.
pub fn sym_operator_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0_f64, |acc, &e| acc.max(e.abs()))
}

/// Infinity norm of a vector.
pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sym_sqrt_squares_back() {
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.6, 0.3, 1.0, 0.1, 0.6, 0.1, 1.0]);
        let h = sym_sqrt(&r).unwrap();
        let back = &h * &h;
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back[(i, j)], r[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sym_sqrt_rejects_indefinite() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(sym_sqrt(&r).is_err());
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = &v * v.transpose();
        assert_eq!(numerical_rank(&m, 1e-10), 1);
    }

    #[test]
    fn ridge_recovers_singular_solve() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        // Singular, but ridge makes it solvable.
        assert!(solve_spd(&m, &b, 1e-10).is_some());
    }
}
