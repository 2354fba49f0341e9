//! Dense symmetric positive-definite factorization with a jitter ladder.
//!
//! All covariance solves in this crate go through [`CholeskyFactor`]. When a
//! matrix fails to factor, a jitter of 1e-8 times the mean diagonal is added
//! and escalated by factors of 10 up to 1e-2 times the mean diagonal before
//! giving up.
//!
//! With the `lapack` feature (default) the factorization calls `dpotrf` /
//! `dpotrs` from the system OpenBLAS; otherwise nalgebra's pure-Rust Cholesky
//! is used. Both paths produce the same factor up to floating-point rounding
//! of the respective algorithms.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("dimension mismatch: matrix is {0}x{0}, rhs has {1} rows")]
    RhsMismatch(usize, usize),
}

/// Lower-triangular Cholesky factor L with M = L Lᵀ.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    /// Jitter that had to be added to the diagonal to make the factorization
    /// succeed; 0 when the matrix factored as-is.
    pub jitter: f64,
}

#[cfg(feature = "lapack")]
mod lapack {
    extern "C" {
        pub fn dpotrf_(uplo: *const u8, n: *const i32, a: *mut f64, lda: *const i32, info: *mut i32);
        pub fn dpotrs_(
            uplo: *const u8,
            n: *const i32,
            nrhs: *const i32,
            a: *const f64,
            lda: *const i32,
            b: *mut f64,
            ldb: *const i32,
            info: *mut i32,
        );
    }
}

/// In-place lower Cholesky of a column-major buffer. Returns false when the
/// matrix is not positive definite.
#[cfg(feature = "lapack")]
fn factor_in_place(m: &mut DMatrix<f64>) -> bool {
    let n = m.nrows() as i32;
    let mut info = 0i32;
    unsafe {
        lapack::dpotrf_(b"L".as_ptr(), &n, m.as_mut_slice().as_mut_ptr(), &n, &mut info);
    }
    info == 0
}

#[cfg(not(feature = "lapack"))]
fn factor_in_place(m: &mut DMatrix<f64>) -> bool {
    match m.clone().cholesky() {
        Some(c) => {
            *m = c.unpack();
            true
        }
        None => false,
    }
}

impl CholeskyFactor {
    /// Factor a symmetric matrix, escalating diagonal jitter on failure.
    pub fn new(m: &DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::NotSquare(m.nrows(), m.ncols()));
        }
        let n = m.nrows();
        let mean_diag = m.diagonal().sum() / n as f64;
        let mut attempt = m.clone();
        if factor_in_place(&mut attempt) {
            return Ok(CholeskyFactor { l: attempt, jitter: 0.0 });
        }
        let mut jitter = 1e-8 * mean_diag;
        let max_jitter = 1e-2 * mean_diag;
        while jitter > 0.0 && jitter <= max_jitter * (1.0 + 1e-12) {
            attempt.copy_from(m);
            for d in 0..n {
                attempt[(d, d)] += jitter;
            }
            if factor_in_place(&mut attempt) {
                return Ok(CholeskyFactor { l: attempt, jitter });
            }
            jitter *= 10.0;
        }
        Err(LinalgError::NotPositiveDefinite)
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve M x = rhs for a matrix right-hand side.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
        if rhs.nrows() != self.dim() {
            return Err(LinalgError::RhsMismatch(self.dim(), rhs.nrows()));
        }
        let mut out = rhs.clone();
        self.solve_in_place(&mut out);
        Ok(out)
    }

    /// Solve M x = rhs for a vector right-hand side.
    pub fn solve_vector(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
        if rhs.nrows() != self.dim() {
            return Err(LinalgError::RhsMismatch(self.dim(), rhs.nrows()));
        }
        let mut out = rhs.clone();
        let mut m = DMatrix::from_column_slice(out.nrows(), 1, out.as_slice());
        self.solve_in_place(&mut m);
        out.copy_from_slice(m.as_slice());
        Ok(out)
    }

    #[cfg(feature = "lapack")]
    fn solve_in_place(&self, rhs: &mut DMatrix<f64>) {
        let n = self.dim() as i32;
        let nrhs = rhs.ncols() as i32;
        let mut info = 0i32;
        unsafe {
            lapack::dpotrs_(
                b"L".as_ptr(),
                &n,
                &nrhs,
                self.l.as_slice().as_ptr(),
                &n,
                rhs.as_mut_slice().as_mut_ptr(),
                &n,
                &mut info,
            );
        }
        debug_assert_eq!(info, 0);
    }

    #[cfg(not(feature = "lapack"))]
    fn solve_in_place(&self, rhs: &mut DMatrix<f64>) {
        self.l.solve_lower_triangular_mut(rhs);
        self.l.transpose().solve_upper_triangular_mut(rhs);
    }

    /// L ξ for the lower-triangular factor: turns standard-normal draws into
    /// draws with covariance M. Only the lower triangle is read; the upper
    /// triangle of the factor storage is unspecified.
    pub fn lower_mul(&self, xi: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(xi.len(), n, "draw length must match factor dimension");
        let mut out = vec![0.0; n];
        for r in 0..n {
            let mut acc = 0.0;
            for c in 0..=r {
                acc += self.l[(r, c)] * xi[c];
            }
            out[r] = acc;
        }
        out
    }

    /// log |M| = 2 sum_i log L_ii.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|d| self.l[(d, d)].ln()).sum::<f64>()
    }

    /// Quadratic form yᵀ M⁻¹ y.
    pub fn quad_form(&self, y: &DVector<f64>) -> Result<f64, LinalgError> {
        let solved = self.solve_vector(y)?;
        Ok(y.dot(&solved))
    }
}

/// Solve M x = rhs via Cholesky with the jitter ladder described above.
pub fn jittered_cholesky_solve(
    m: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    CholeskyFactor::new(m)?.solve_matrix(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_solve_returns_rhs() {
        let m = DMatrix::<f64>::identity(3, 3);
        let rhs = DMatrix::from_column_slice(3, 1, &[1.0, -2.5, 7.0]);
        let x = jittered_cholesky_solve(&m, &rhs).unwrap();
        assert_eq!(x, rhs);
    }

    #[test]
    fn diagonal_solve_hand_case() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let rhs = DMatrix::from_column_slice(2, 1, &[2.0, 8.0]);
        let x = jittered_cholesky_solve(&m, &rhs).unwrap();
        assert_abs_diff_eq!(x[(0, 0)], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[(1, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn random_spd_residual_small() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 10;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::<f64>::identity(n, n) * 0.5;
        let rhs = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let x = jittered_cholesky_solve(&m, &rhs).unwrap();
        let resid = (&m * &x - &rhs).norm() / rhs.norm();
        assert!(resid <= 1e-10, "relative residual {resid}");
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        // Rank-1: factors only after jitter, which the ladder supplies.
        let f = CholeskyFactor::new(&m).unwrap();
        assert!(f.jitter > 0.0);

        let neg = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert_eq!(CholeskyFactor::new(&neg).unwrap_err(), LinalgError::NotPositiveDefinite);
    }

    #[test]
    fn log_det_matches_diagonal_product() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let f = CholeskyFactor::new(&m).unwrap();
        assert_abs_diff_eq!(f.log_det(), (8.0f64).ln(), epsilon = 1e-13);
    }
}
