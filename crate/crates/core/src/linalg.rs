//! Small dense helpers shared by the fitters and the risk computations.
//!
//! Designs are tall (`n` up to 2^20) and narrow (`d` at most a few dozen), so
//! everything reduces to `d x d` systems that are factored directly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest accepted eigenvalue ratio of a Gram matrix before it is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// `X^T X`.
pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.tr_mul(x)
}

/// `X^T v`.
pub fn xt_vec(x: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    debug_assert_eq!(x.nrows(), v.len());
    x.tr_mul(&DVector::from_column_slice(v))
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite matrix.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Cholesky factor of a symmetric positive definite matrix, rejecting
/// ill-conditioned inputs.
pub fn spd_factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let condition = condition_estimate(a);
    if condition > CONDITION_LIMIT {
        return Err(Error::SingularDesign { condition });
    }
    Cholesky::new(a.clone()).ok_or(Error::SingularDesign { condition })
}

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
///
/// Iterates until the Rayleigh quotient changes by less than `rel_tol`
/// relative, or `max_iter` is hit.
pub fn power_iteration<F>(dim: usize, apply: F, rel_tol: f64, max_iter: usize) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if dim == 0 {
        return 0.0;
    }
    // Deterministic start with mass in every coordinate.
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..max_iter {
        let w = apply(&v);
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - estimate).abs() <= rel_tol * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Squared spectral norm of `(X^T X)^{-1} X^T`, i.e. the largest eigenvalue of
/// `(X^T X)^{-1}`, by power iteration on the Cholesky solve.
pub fn pseudo_inverse_op_norm_sq(chol: &Cholesky<f64, Dyn>, dim: usize) -> f64 {
    power_iteration(dim, |v| chol.solve(v), 1e-12, 10_000)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_eigendecomposition() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let exact = SymmetricEigen::new(a.clone()).eigenvalues.max();
        let est = power_iteration(3, |v| &a * v, 1e-14, 10_000);
        assert!((est - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn singular_gram_is_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(spd_factor(&gram(&x)), Err(Error::SingularDesign { .. })));
    }
}
