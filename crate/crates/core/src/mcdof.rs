//! Monte-Carlo degrees of freedom for black-box estimators.
//!
//! For a probe `b ~ N(0, I)` and step `eps`, each repeat contributes
//! `sum_n b_n (mu^{y + eps b}(x_n) - mu^y(x_n)) / eps`, whose expectation is
//! the divergence of the fitted values with respect to the targets.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::FeatureMatrix;
use crate::data::noise_draw;
use crate::error::{NclError, Result};
use crate::gram::{phi_y, WhitenedGram};
use crate::ncl::{fit_with_phi_y, predict_ensemble};

/// A training procedure over a fixed design: targets in, fitted values at the
/// same N design points out. Must be deterministic in its input.
pub trait EstimatorOracle: Sync {
    fn fit_predict(&self, y: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> EstimatorOracle for F
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    fn fit_predict(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self(y)
    }
}

/// Closed-form NCL at a fixed lambda over a fixed factorization.
pub struct NclOracle<'a> {
    pub wg: &'a WhitenedGram,
    pub phi: &'a FeatureMatrix,
    pub lambda: f64,
}

impl EstimatorOracle for NclOracle<'_> {
    fn fit_predict(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let fe = fit_with_phi_y(self.wg, &phi_y(self.phi, y)?, self.lambda)?;
        predict_ensemble(&fe, self.phi)
    }
}

/// `y -> S y` for a fixed square matrix.
pub struct LinearSmootherOracle {
    pub s: DMatrix<f64>,
}

impl EstimatorOracle for LinearSmootherOracle {
    fn fit_predict(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.s.ncols() {
            return Err(NclError::Dimension("smoother size does not match targets".into()));
        }
        Ok(&self.s * y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McDfEstimate {
    pub value: f64,
    pub epsilon: f64,
    pub repeats: usize,
    pub per_repeat: Vec<f64>,
    pub std_error: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_REPEATS: usize = 50;

/// Probe vector for repeat `r`: ChaCha stream `r` of `seed`, so repeats are
/// independent of evaluation order.
fn probe(n: usize, seed: u64, repeat: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat as u64);
    noise_draw(n, 1.0, &mut rng)
}

pub fn estimate_df<O: EstimatorOracle + ?Sized>(
    oracle: &O,
    y: &DVector<f64>,
    epsilon: f64,
    repeats: usize,
    seed: u64,
) -> Result<McDfEstimate> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(NclError::InvalidArgument(format!("epsilon = {epsilon} must be positive")));
    }
    if repeats == 0 {
        return Err(NclError::InvalidArgument("repeats must be at least 1".into()));
    }
    let n = y.len();
    let base = oracle
        .fit_predict(y)
        .map_err(|e| NclError::Oracle { repeat: 0, source: Box::new(e) })?;
    if base.len() != n {
        return Err(NclError::Dimension(format!("oracle returned {} values for {n} targets", base.len())));
    }
    let per_repeat = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let b = probe(n, seed, r);
            let perturbed = oracle
                .fit_predict(&(y + &b * epsilon))
                .map_err(|e| NclError::Oracle { repeat: r, source: Box::new(e) })?;
            if perturbed.len() != n {
                return Err(NclError::Dimension("oracle output length changed".into()));
            }
            Ok(b.dot(&(perturbed - &base)) / epsilon)
        })
        .collect::<Result<Vec<f64>>>()?;
    let k = repeats as f64;
    let value = per_repeat.iter().sum::<f64>() / k;
    let std_error = if repeats > 1 {
        (per_repeat.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        0.0
    };
    Ok(McDfEstimate { value, epsilon, repeats, per_repeat, std_error })
}
