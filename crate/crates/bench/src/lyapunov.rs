//! Lyapunov equation `AᵀP + PA = -I` by vectorization.

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Solves `AᵀP + PA = -I` for Hurwitz `A`.
///
/// Uses `(I ⊗ Aᵀ + Aᵀ ⊗ I)·vec(P) = -vec(I)` with a dense LU solve, then
/// symmetrizes and checks positive definiteness.
pub fn solve_lyapunov(a: &DMatrix<f64>) -> anyhow::Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || n == 0 {
        bail!("Lyapunov equation needs a nonempty square matrix");
    }
    let max_re = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(max_re < 0.0) {
        bail!("closed-loop matrix is not Hurwitz (max real part {max_re:e})");
    }

    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let big = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DVector::from_column_slice(eye.as_slice());
    let vec_p = big.lu().solve(&rhs).context("Lyapunov operator is singular")?;
    let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;

    let min_eig = SymmetricEigen::new(p.clone()).eigenvalues.min();
    if !(min_eig > 0.0) {
        bail!("Lyapunov solution is not positive definite (min eigenvalue {min_eig:e})");
    }
    Ok(p)
}

/// `‖AᵀP + PA + I‖_max`.
pub fn residual(a: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    (a.transpose() * p + p * a + DMatrix::<f64>::identity(n, n)).amax()
}
