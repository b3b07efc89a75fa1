//! Empirical Gram structures and the block-whitened matrix `P`.
//!
//! With `D` the block diagonal of the full Gram matrix `G` and `W = D^{-1/2}`
//! (block by block), `P = W G W`. Its eigenvalues lie in `[0, M]`, sum to
//! `H * M`, and drive every solve and degrees-of-freedom computation.

use nalgebra::{DMatrix, DVector};

use crate::basis::FeatureMatrix;
use crate::error::{NclError, Result};
use crate::linalg::{inv_sqrt_spd, sym_eigen_sorted, zero_threshold};

#[derive(Debug, Clone)]
pub struct GramBundle {
    /// `(1/N) Phi Phi^T`, Q×Q.
    pub gram_full: DMatrix<f64>,
    /// The M diagonal H×H blocks of `gram_full`.
    pub gram_diag_blocks: Vec<DMatrix<f64>>,
    /// `(1/N) Phi y`.
    pub phi_y: DVector<f64>,
    pub n: usize,
    pub h: usize,
    pub m: usize,
}

/// `(1/N) Phi y`.
pub fn phi_y(phi: &FeatureMatrix, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != phi.n() {
        return Err(NclError::Dimension(format!("{} targets for {} feature columns", y.len(), phi.n())));
    }
    Ok(&phi.phi * y / phi.n() as f64)
}

pub fn compute_gram(phi: &FeatureMatrix, y: &DVector<f64>) -> Result<GramBundle> {
    let n = phi.n();
    if n == 0 {
        return Err(NclError::Dimension("no samples".into()));
    }
    let py = phi_y(phi, y)?;
    let mut gram_full = &phi.phi * phi.phi.transpose() / n as f64;
    // exact symmetry; the product is symmetric only up to summation order
    for i in 0..gram_full.nrows() {
        for j in 0..i {
            let v = 0.5 * (gram_full[(i, j)] + gram_full[(j, i)]);
            gram_full[(i, j)] = v;
            gram_full[(j, i)] = v;
        }
    }
    let (h, m) = (phi.h, phi.m);
    let gram_diag_blocks = (0..m).map(|b| gram_full.view((b * h, b * h), (h, h)).into_owned()).collect();
    Ok(GramBundle { gram_full, gram_diag_blocks, phi_y: py, n, h, m })
}

impl GramBundle {
    pub fn q(&self) -> usize {
        self.h * self.m
    }
}

#[derive(Debug, Clone)]
pub struct WhitenedGram {
    pub p_matrix: DMatrix<f64>,
    /// Descending, roundoff negatives clamped to zero.
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// `<phi_m, phi_m>^{-1/2}` per member.
    pub whitener_blocks: Vec<DMatrix<f64>>,
    pub rank_p: usize,
    /// Eigenvalues at or below this count as zero.
    pub zero_tol: f64,
    pub h: usize,
    pub m: usize,
}

pub fn whiten(g: &GramBundle) -> Result<WhitenedGram> {
    let (h, m) = (g.h, g.m);
    let whitener_blocks = g
        .gram_diag_blocks
        .iter()
        .enumerate()
        .map(|(member, block)| {
            inv_sqrt_spd(block).map_err(|min_eigenvalue| NclError::RankDeficientBlock { member, min_eigenvalue })
        })
        .collect::<Result<Vec<_>>>()?;
    let p_matrix = block_sandwich(&whitener_blocks, &g.gram_full, h);
    let eig = sym_eigen_sorted(&p_matrix);
    let mut eigenvalues = eig.values;
    eigenvalues.apply(|v| *v = v.max(0.0));
    let zero_tol = zero_threshold(eigenvalues.as_slice());
    let rank_p = eigenvalues.iter().filter(|&&v| v > zero_tol).count();
    Ok(WhitenedGram { p_matrix, eigenvalues, eigenvectors: eig.vectors, whitener_blocks, rank_p, zero_tol, h, m })
}

/// `W A W` for block-diagonal `W`, computed block by block and symmetrized.
pub(crate) fn block_sandwich(blocks: &[DMatrix<f64>], a: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let m = blocks.len();
    let q = h * m;
    let mut out = DMatrix::zeros(q, q);
    for l in 0..m {
        for k in l..m {
            let sub = &blocks[l] * a.view((l * h, k * h), (h, h)) * &blocks[k];
            out.view_mut((l * h, k * h), (h, h)).copy_from(&sub);
            if k != l {
                out.view_mut((k * h, l * h), (h, h)).copy_from(&sub.transpose());
            }
        }
    }
    let sym = (&out + out.transpose()) * 0.5;
    sym
}

impl WhitenedGram {
    pub fn q(&self) -> usize {
        self.h * self.m
    }

    /// Apply the block-diagonal whitener to a Q vector.
    pub fn apply_whitener(&self, v: &DVector<f64>) -> DVector<f64> {
        let h = self.h;
        let mut out = DVector::zeros(v.len());
        for (b, w) in self.whitener_blocks.iter().enumerate() {
            out.rows_mut(b * h, h).copy_from(&(w * v.rows(b * h, h)));
        }
        out
    }

    /// Apply the block-diagonal whitener to every column of a Q×N matrix.
    pub fn whiten_columns(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let h = self.h;
        let mut out = DMatrix::zeros(phi.nrows(), phi.ncols());
        for (b, w) in self.whitener_blocks.iter().enumerate() {
            out.rows_mut(b * h, h).copy_from(&(w * phi.rows(b * h, h)));
        }
        out
    }

    /// Spectral weights `1 / (M(1-lambda) + lambda rho)` with zero for
    /// vanishing denominators or zero eigenvalues at `lambda = 1`.
    pub fn spectral_gains(&self, lambda: f64) -> DVector<f64> {
        let mf = self.m as f64;
        self.eigenvalues.map(|rho| spectral_gain(rho, lambda, mf, self.zero_tol))
    }

    /// Write the eigenvalue spectrum as a one-column CSV.
    pub fn write_spectrum_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["rho"])?;
        for v in self.eigenvalues.iter() {
            w.write_record([format!("{v:?}")])?;
        }
        w.flush().map_err(|source| NclError::Io { path: path.as_ref().to_path_buf(), source })?;
        Ok(())
    }
}

pub(crate) fn spectral_gain(rho: f64, lambda: f64, m: f64, zero_tol: f64) -> f64 {
    let rho = if rho > zero_tol { rho } else { 0.0 };
    let denom = m * (1.0 - lambda) + lambda * rho;
    if denom > 0.0 && (rho > 0.0 || lambda < 1.0) {
        1.0 / denom
    } else {
        0.0
    }
}
