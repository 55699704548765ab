//! Sparse-matrix helpers shared by assembly, modal analysis, and the plant.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CscMatrix};

/// Materialize a sparse matrix densely (small problems and tests).
pub fn csc_to_dense(a: &CscMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        out[(i, j)] += *v;
    }
    out
}

/// y = A x for sparse A.
pub fn csc_mul_vec(a: &CscMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    let mut y = DVector::zeros(a.nrows());
    for (i, j, v) in a.triplet_iter() {
        y[i] += *v * x[j];
    }
    y
}

/// Y = A X for sparse A and dense X.
pub fn csc_mul_dense(a: &CscMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.ncols(), x.nrows());
    let m = x.ncols();
    let mut y = DMatrix::zeros(a.nrows(), m);
    for (i, j, v) in a.triplet_iter() {
        for c in 0..m {
            y[(i, c)] += *v * x[(j, c)];
        }
    }
    y
}

/// Infinity norm (max absolute row sum).
pub fn csc_inf_norm(a: &CscMatrix<f64>) -> f64 {
    let mut row_sums = vec![0.0f64; a.nrows()];
    for (i, _, v) in a.triplet_iter() {
        row_sums[i] += v.abs();
    }
    row_sums.into_iter().fold(0.0, f64::max)
}

/// A + sigma I.
pub fn csc_add_diag(a: &CscMatrix<f64>, sigma: f64) -> CscMatrix<f64> {
    let n = a.nrows().max(a.ncols());
    let mut coo = CooMatrix::new(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        coo.push(i, j, *v);
    }
    for i in 0..n {
        coo.push(i, i, sigma);
    }
    CscMatrix::from(&coo)
}
