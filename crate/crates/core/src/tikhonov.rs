//! Ridge regression on whitened member features and its exact
//! correspondence with NCL.
//!
//! With member features whitened by `<phi_m, phi_m>^{-1/2}` and stacked as
//! `psi(x) = (1/M) W phi(x)`, ridge regression with penalty `gamma` gives the
//! predictor `<phi, y>^T (gamma M^2 D + G)^+ phi(x)`. Matching this against
//! the NCL solution shows that `gamma = (1 - lambda) / (M lambda)` reproduces
//! `lambda * F_lambda` exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate, BasisEnsemble, FeatureMatrix};
use crate::error::{NclError, Result};
use crate::gram::{compute_gram, whiten, WhitenedGram};
use crate::linalg::pinv_sym;
use crate::ncl::{fit, predict_ensemble};

/// Number of fresh points at which [`equivalence_check`] compares predictors.
pub const PROBE_POINTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub gamma: f64,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_ref: Option<String>,
}

impl RidgeFit {
    /// Predictions at the columns of `psi`.
    pub fn predict(&self, psi: &DMatrix<f64>) -> Result<DVector<f64>> {
        if psi.nrows() != self.weights.len() {
            return Err(NclError::Dimension(format!("{} feature rows for {} weights", psi.nrows(), self.weights.len())));
        }
        Ok(psi.tr_mul(&DVector::from_column_slice(&self.weights)))
    }
}

/// Whitened per-member features `W_m phi_m(x)` at the rows of `x`, Q×N'.
pub fn whitened_features(basis: &BasisEnsemble, wg: &WhitenedGram, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let phi = evaluate(basis, x)?;
    whiten_feature_matrix(wg, &phi)
}

pub fn whiten_feature_matrix(wg: &WhitenedGram, phi: &FeatureMatrix) -> Result<DMatrix<f64>> {
    if phi.h != wg.h || phi.m != wg.m {
        return Err(NclError::Dimension("features do not match the whitener".into()));
    }
    Ok(wg.whiten_columns(&phi.phi))
}

/// Ridge penalty matching diversity `lambda` for an ensemble of `m` members.
pub fn gamma_for_lambda(lambda: f64, m: usize) -> Result<f64> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(NclError::InvalidArgument(format!(
            "lambda = {lambda}: the matching ridge penalty exists only for lambda in (0, 1]"
        )));
    }
    if m == 0 {
        return Err(NclError::InvalidArgument("M must be positive".into()));
    }
    Ok((1.0 - lambda) / (m as f64 * lambda))
}

/// `w = (gamma I + (1/N) psi psi^T)^+ (1/N) psi y` with `psi` Q×N.
pub fn fit_ridge(psi: &DMatrix<f64>, y: &DVector<f64>, gamma: f64) -> Result<RidgeFit> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(NclError::InvalidArgument(format!("gamma = {gamma} must be finite and >= 0")));
    }
    if psi.ncols() != y.len() || y.is_empty() {
        return Err(NclError::Dimension(format!("{} feature columns for {} targets", psi.ncols(), y.len())));
    }
    let n = y.len() as f64;
    let q = psi.nrows();
    let normal = psi * psi.transpose() / n + DMatrix::identity(q, q) * gamma;
    let rhs = psi * y / n;
    let weights = pinv_sym(&normal) * rhs;
    Ok(RidgeFit { gamma, weights: weights.as_slice().to_vec(), basis_ref: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalencePoint {
    pub lambda: f64,
    pub gamma: f64,
    /// `max |G(x) - lambda F(x)| / (1 + |lambda F(x)|)` over the probe points.
    pub max_deviation: f64,
}

/// Compare ridge on stacked whitened features with `lambda * F_lambda` on
/// probe features `phi_probe`, for every lambda in `grid`.
pub fn equivalence_check_features(
    phi_train: &FeatureMatrix,
    y: &DVector<f64>,
    phi_probe: &FeatureMatrix,
    grid: &[f64],
) -> Result<Vec<EquivalencePoint>> {
    let g = compute_gram(phi_train, y)?;
    let wg = whiten(&g)?;
    let inv_m = 1.0 / wg.m as f64;
    let psi_train = whiten_feature_matrix(&wg, phi_train)? * inv_m;
    let psi_probe = whiten_feature_matrix(&wg, phi_probe)? * inv_m;
    grid.iter()
        .map(|&lambda| {
            let gamma = gamma_for_lambda(lambda, wg.m)?;
            let ncl = predict_ensemble(&fit(&wg, &g, lambda)?, phi_probe)? * lambda;
            let ridge = fit_ridge(&psi_train, y, gamma)?.predict(&psi_probe)?;
            let max_deviation = ridge
                .iter()
                .zip(ncl.iter())
                .map(|(r, f)| (r - f).abs() / (1.0 + f.abs()))
                .fold(0.0, f64::max);
            Ok(EquivalencePoint { lambda, gamma, max_deviation })
        })
        .collect()
}

/// [`equivalence_check_features`] on a training design `x`, with
/// [`PROBE_POINTS`] fresh probes drawn uniformly from `[-1, 1]^d`.
pub fn equivalence_check(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    basis: &BasisEnsemble,
    grid: &[f64],
    probe_seed: u64,
) -> Result<Vec<EquivalencePoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probes = DMatrix::from_fn(PROBE_POINTS, basis.d(), |_, _| rng.random_range(-1.0..=1.0));
    equivalence_check_features(&evaluate(basis, x)?, y, &evaluate(basis, &probes)?, grid)
}
