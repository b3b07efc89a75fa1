//! Closed-form NCL ensembles over fixed bases.
//!
//! Every member is `f_m(x) = <w_m, phi_m(x)>` and the ensemble is the mean
//! `F(x) = <beta, phi(x)>` with `beta = w / M`. For a diversity weight
//! `lambda` in `[0, 1]` the minimiser of the averaged NCL loss is
//!
//! ```text
//! beta = (M(1 - lambda) D + lambda G)^+ <phi, y>
//! ```
//!
//! with `G` the Gram matrix and `D` its block diagonal. It is evaluated in
//! whitened coordinates, `beta = W V diag(g(rho)) V^T W <phi, y>`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate, BasisEnsemble, FeatureMatrix};
use crate::error::{check_lambda, NclError, Result};
use crate::gram::{GramBundle, WhitenedGram};

/// Largest N for which [`smoother_matrix`] will materialize `S`.
pub const SMOOTHER_MAX_N: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedEnsemble {
    pub lambda: f64,
    pub h: usize,
    pub m: usize,
    /// Stacked ensemble coefficients (Q).
    pub beta: Vec<f64>,
    /// `M * beta`, split per member.
    pub member_weights: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_ref: Option<String>,
}

impl FittedEnsemble {
    pub fn from_beta(beta: DVector<f64>, lambda: f64, h: usize, m: usize) -> Result<Self> {
        check_lambda(lambda)?;
        if beta.len() != h * m {
            return Err(NclError::Dimension(format!("beta has {} entries, expected {}", beta.len(), h * m)));
        }
        let mf = m as f64;
        let member_weights = beta.as_slice().chunks(h).map(|c| c.iter().map(|b| mf * b).collect()).collect();
        Ok(Self { lambda, h, m, beta: beta.as_slice().to_vec(), member_weights, basis_ref: None })
    }

    pub fn with_basis_ref(mut self, basis: &BasisEnsemble) -> Self {
        self.basis_ref = Some(basis.fingerprint());
        self
    }

    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn q(&self) -> usize {
        self.h * self.m
    }
}

/// Fit with the targets folded into `g.phi_y`.
pub fn fit(wg: &WhitenedGram, g: &GramBundle, lambda: f64) -> Result<FittedEnsemble> {
    fit_with_phi_y(wg, &g.phi_y, lambda)
}

/// Fit for an arbitrary `<phi, y>` against a fixed whitened Gram, so several
/// target columns (or perturbed targets) share one factorization.
pub fn fit_with_phi_y(wg: &WhitenedGram, phi_y: &DVector<f64>, lambda: f64) -> Result<FittedEnsemble> {
    check_lambda(lambda)?;
    let beta = solve_beta(wg, phi_y, lambda)?;
    FittedEnsemble::from_beta(beta, lambda, wg.h, wg.m)
}

pub(crate) fn solve_beta(wg: &WhitenedGram, phi_y: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if phi_y.len() != wg.q() {
        return Err(NclError::Dimension(format!("<phi, y> has {} entries, expected {}", phi_y.len(), wg.q())));
    }
    let u = wg.apply_whitener(phi_y);
    let mut c = wg.eigenvectors.tr_mul(&u);
    c.component_mul_assign(&wg.spectral_gains(lambda));
    Ok(wg.apply_whitener(&(&wg.eigenvectors * c)))
}

/// Ensemble and per-member predictions at the columns of `phi`.
pub fn predict_features(fe: &FittedEnsemble, phi: &FeatureMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if phi.h != fe.h || phi.m != fe.m {
        return Err(NclError::Dimension(format!(
            "model is H = {}, M = {}; features are H = {}, M = {}",
            fe.h, fe.m, phi.h, phi.m
        )));
    }
    let h = fe.h;
    let n = phi.n();
    let mut members = DMatrix::zeros(fe.m, n);
    for (m, w) in fe.member_weights.iter().enumerate() {
        let w = DVector::from_column_slice(w);
        let block = phi.phi.rows(m * h, h);
        members.set_row(m, &(w.transpose() * block));
    }
    let ensemble = DVector::from_iterator(n, members.column_iter().map(|c| c.mean()));
    Ok((ensemble, members))
}

/// Ensemble predictions only, `Phi^T beta`.
pub fn predict_ensemble(fe: &FittedEnsemble, phi: &FeatureMatrix) -> Result<DVector<f64>> {
    if phi.q() != fe.q() {
        return Err(NclError::Dimension(format!("model has Q = {}, features Q = {}", fe.q(), phi.q())));
    }
    Ok(phi.phi.tr_mul(&fe.beta_vector()))
}

pub fn predict(fe: &FittedEnsemble, basis: &BasisEnsemble, x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if let Some(r) = &fe.basis_ref {
        let actual = basis.fingerprint();
        if *r != actual {
            return Err(NclError::Dimension(format!("model was fitted with basis {r}, got {actual}")));
        }
    }
    predict_features(fe, &evaluate(basis, x)?)
}

/// Smoothing matrix `S` with train predictions `S y`.
#[derive(Debug, Clone)]
pub struct SmootherMatrix {
    pub s: DMatrix<f64>,
    pub lambda: f64,
}

/// `S = (1/N) Phi^T (M(1-lambda) D + lambda G)^+ Phi`, built in whitened
/// coordinates as `(1/N) B^T B` with `B = diag(sqrt g) V^T W Phi`.
pub fn smoother_matrix(wg: &WhitenedGram, phi: &FeatureMatrix, lambda: f64) -> Result<SmootherMatrix> {
    check_lambda(lambda)?;
    let n = phi.n();
    if n > SMOOTHER_MAX_N {
        return Err(NclError::SmootherTooLarge { n, limit: SMOOTHER_MAX_N });
    }
    if phi.q() != wg.q() {
        return Err(NclError::Dimension("features do not match whitened gram".into()));
    }
    let psi = wg.whiten_columns(&phi.phi);
    let mut b = wg.eigenvectors.tr_mul(&psi);
    for (mut row, g) in b.row_iter_mut().zip(wg.spectral_gains(lambda).iter()) {
        row *= g.sqrt();
    }
    Ok(SmootherMatrix { s: b.tr_mul(&b) / n as f64, lambda })
}

/// Per-example NCL loss: average member error minus `lambda` times the
/// member spread around the ensemble mean.
pub fn ncl_loss(member_preds: &[f64], y: f64, lambda: f64) -> f64 {
    let mf = member_preds.len() as f64;
    let f = member_preds.iter().sum::<f64>() / mf;
    let err = member_preds.iter().map(|p| (p - y).powi(2)).sum::<f64>() / mf;
    let spread = member_preds.iter().map(|p| (p - f).powi(2)).sum::<f64>() / mf;
    err - lambda * spread
}

/// The same loss as a convex mix of individual and combined accuracy.
pub fn ncl_loss_mixed(member_preds: &[f64], y: f64, lambda: f64) -> f64 {
    let mf = member_preds.len() as f64;
    let f = member_preds.iter().sum::<f64>() / mf;
    let err = member_preds.iter().map(|p| (p - y).powi(2)).sum::<f64>() / mf;
    (1.0 - lambda) * err + lambda * (f - y).powi(2)
}

/// NCL loss averaged over a dataset; `member_preds` is M×N.
pub fn ncl_objective(member_preds: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<f64> {
    if member_preds.ncols() != y.len() {
        return Err(NclError::Dimension("prediction columns do not match targets".into()));
    }
    let total: f64 = member_preds
        .column_iter()
        .zip(y.iter())
        .map(|(c, &t)| ncl_loss(c.as_slice(), t, lambda))
        .sum();
    Ok(total / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub ensemble_error: f64,
    pub average_member_error: f64,
    pub diversity: f64,
}

/// Squared ensemble error split into average member error minus diversity.
pub fn ambiguity(member_preds: &[f64], y: f64) -> DecompositionReport {
    let mf = member_preds.len() as f64;
    let f = member_preds.iter().sum::<f64>() / mf;
    DecompositionReport {
        ensemble_error: (f - y).powi(2),
        average_member_error: member_preds.iter().map(|p| (p - y).powi(2)).sum::<f64>() / mf,
        diversity: member_preds.iter().map(|p| (p - f).powi(2)).sum::<f64>() / mf,
    }
}

fn mean_sq_dev(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(NclError::Dimension(format!("lengths {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Mean squared error against observed targets.
pub fn emp_error(preds: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    mean_sq_dev(preds, y)
}

/// Mean squared error against the noiseless regression function.
pub fn true_error(preds: &DVector<f64>, mu_values: &DVector<f64>) -> Result<f64> {
    mean_sq_dev(preds, mu_values)
}
