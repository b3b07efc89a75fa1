//! Symmetric eigen helpers shared by the gram, ridge and smoother code.

use nalgebra::{DMatrix, DVector};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Columns of `vectors` follow the same order.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn sym_eigen_sorted(mat: &DMatrix<f64>) -> SortedEigen {
    let n = mat.nrows();
    let sym = (mat + mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    SortedEigen { values, vectors }
}

/// Relative cutoff below which an eigenvalue counts as zero:
/// `len * eps * max(|value|)`.
pub fn zero_threshold(values: &[f64]) -> f64 {
    let max = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    values.len() as f64 * f64::EPSILON * max
}

/// Symmetric inverse square root of a positive definite matrix.
/// Returns the smallest eigenvalue on failure.
pub fn inv_sqrt_spd(mat: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let eig = sym_eigen_sorted(mat);
    let min = eig.values[eig.values.len() - 1];
    let tol = zero_threshold(eig.values.as_slice());
    if !(min > tol) {
        return Err(min);
    }
    let scale = eig.values.map(|v| 1.0 / v.sqrt());
    Ok(&eig.vectors * DMatrix::from_diagonal(&scale) * eig.vectors.transpose())
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix via its
/// eigendecomposition, dropping eigenvalues under [`zero_threshold`].
pub fn pinv_sym(mat: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = sym_eigen_sorted(mat);
    let tol = zero_threshold(eig.values.as_slice());
    let inv = eig.values.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    &eig.vectors * DMatrix::from_diagonal(&inv) * eig.vectors.transpose()
}

/// Numerical rank under the same relative cutoff.
pub fn sym_rank(mat: &DMatrix<f64>) -> usize {
    let eig = sym_eigen_sorted(mat);
    let tol = zero_threshold(eig.values.as_slice());
    eig.values.iter().filter(|&&v| v > tol).count()
}
