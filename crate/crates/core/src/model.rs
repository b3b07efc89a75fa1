//! Self-contained model files: basis, standardization and one fitted
//! ensemble per target column.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate, frequency_heuristic, sample_rff, BasisEnsemble};
use crate::data::{Dataset, StandardizationParams};
use crate::error::{NclError, Result};
use crate::gram::{compute_gram, phi_y, whiten};
use crate::ncl::{emp_error, fit_with_phi_y, predict_ensemble, FittedEnsemble};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub lambda: f64,
    pub h: usize,
    pub m: usize,
    pub q: usize,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub standardization: StandardizationParams,
    pub basis: BasisEnsemble,
    pub fits: Vec<FittedEnsemble>,
    /// Training MSE per target, on the standardized scale.
    pub train_emp_err: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    Fixed(f64),
    /// Median-distance heuristic on the standardized training features.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub h: usize,
    pub m: usize,
    pub lambda: f64,
    pub gamma: GammaChoice,
    pub seed: u64,
}

/// Standardize `raw`, sample a basis and fit every target column at one lambda.
pub fn train_model(raw: &Dataset, settings: &TrainSettings) -> Result<ModelFile> {
    let (train, standardization) = crate::data::standardize(raw)?;
    let gamma = match settings.gamma {
        GammaChoice::Fixed(g) => g,
        GammaChoice::Auto => frequency_heuristic(&train.features, settings.seed)?,
    };
    let basis = sample_rff(train.d(), settings.h, settings.m, gamma, settings.seed)?;
    let phi = evaluate(&basis, &train.features)?;
    let g = compute_gram(&phi, &train.target(0))?;
    let wg = whiten(&g)?;
    let mut fits = Vec::with_capacity(train.t());
    let mut train_emp_err = Vec::with_capacity(train.t());
    for t in 0..train.t() {
        let y = train.target(t);
        let fe = fit_with_phi_y(&wg, &phi_y(&phi, &y)?, settings.lambda)?.with_basis_ref(&basis);
        train_emp_err.push(emp_error(&predict_ensemble(&fe, &phi)?, &y)?);
        fits.push(fe);
    }
    Ok(ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        lambda: settings.lambda,
        h: settings.h,
        m: settings.m,
        q: settings.h * settings.m,
        feature_names: raw.feature_names.clone(),
        target_names: raw.target_names.clone(),
        standardization,
        basis,
        fits,
        train_emp_err,
    })
}

impl ModelFile {
    /// Standardized-scale predictions (N×T) for raw features.
    pub fn predict_standardized(&self, x_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = self.standardization.transform_features(x_raw)?;
        let phi = evaluate(&self.basis, &x)?;
        let mut out = DMatrix::zeros(x.nrows(), self.fits.len());
        for (t, fe) in self.fits.iter().enumerate() {
            out.set_column(t, &predict_ensemble(fe, &phi)?);
        }
        Ok(out)
    }

    /// Predictions in the original target units.
    pub fn predict(&self, x_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.standardization.invert_targets(&self.predict_standardized(x_raw)?))
    }

    /// Standardized-scale MSE per target for raw features and targets.
    pub fn emp_error(&self, x_raw: &DMatrix<f64>, y_raw: &DMatrix<f64>) -> Result<Vec<f64>> {
        if y_raw.ncols() != self.fits.len() {
            return Err(NclError::Dimension("target columns do not match the model".into()));
        }
        let preds = self.predict_standardized(x_raw)?;
        let y = self.standardization.transform_targets(y_raw);
        (0..self.fits.len())
            .map(|t| emp_error(&preds.column(t).into_owned(), &y.column(t).into_owned()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| NclError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| NclError::Io { path: path.to_path_buf(), source })?;
        let model: ModelFile = serde_json::from_str(&text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(NclError::InvalidArgument(format!("unsupported model format {}", model.format_version)));
        }
        Ok(model)
    }
}
