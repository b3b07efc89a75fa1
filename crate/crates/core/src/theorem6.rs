//! Fixed-design experiment on where the expected true error is minimised
//! over lambda: at `lambda = 1` without noise, strictly inside `[0, 1)` with
//! noise.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate, BasisEnsemble, FeatureMatrix};
use crate::data::{noise_draw, synthesize, SynthSpec};
use crate::error::{NclError, Result};
use crate::gram::{compute_gram, phi_y, whiten, WhitenedGram};
use crate::ncl::{fit_with_phi_y, predict_ensemble, true_error};

pub const MIN_DRAWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueErrorStat {
    pub lambda: f64,
    /// Monte-Carlo mean of the true error over noise redraws.
    pub mean: f64,
    pub std_error: f64,
    /// Exact expectation: squared bias plus `sigma^2 / N * trace(S^2)`.
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem6Report {
    pub sigma: f64,
    pub n: usize,
    pub k_draws: usize,
    pub mean_true_err: Vec<TrueErrorStat>,
    pub lambda_best: f64,
    /// Slope of the expected true error at `lambda = 1`:
    /// `(2 sigma^2 / N) sum_{rho > 0} (M - rho) / rho`.
    pub derivative_at_one: f64,
}

/// `(2 sigma^2 / N) * sum over positive rho of (M - rho) / rho`.
pub fn derivative_at_one(wg: &WhitenedGram, sigma: f64, n: usize) -> f64 {
    let mf = wg.m as f64;
    let sum: f64 = wg.eigenvalues.iter().filter(|&&r| r > wg.zero_tol).map(|&r| (mf - r) / r).sum();
    2.0 * sigma * sigma / n as f64 * sum
}

/// Exact `E[R_true(F_lambda)]` under i.i.d. noise of std `sigma`.
pub fn expected_true_error(
    wg: &WhitenedGram,
    phi: &FeatureMatrix,
    mu: &DVector<f64>,
    sigma: f64,
    lambda: f64,
) -> Result<f64> {
    let fe = fit_with_phi_y(wg, &phi_y(phi, mu)?, lambda)?;
    let bias = true_error(&predict_ensemble(&fe, phi)?, mu)?;
    let gains = wg.spectral_gains(lambda);
    let trace_s2: f64 = wg
        .eigenvalues
        .iter()
        .zip(gains.iter())
        .filter(|(r, _)| **r > wg.zero_tol)
        .map(|(r, g)| (r * g).powi(2))
        .sum();
    Ok(bias + sigma * sigma * trace_s2 / mu.len() as f64)
}

/// Index of the smallest value; values within `1e-12` relative of the
/// minimum count as ties and resolve to the largest lambda.
fn argmin_prefer_last(values: &[f64]) -> usize {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + min.abs());
    values.iter().rposition(|&v| v <= min + tol).unwrap_or(0)
}

pub fn run_theorem6(
    spec: &SynthSpec,
    basis: &BasisEnsemble,
    lambda_grid: &[f64],
    k_draws: usize,
    seed: u64,
) -> Result<Theorem6Report> {
    if k_draws < MIN_DRAWS {
        return Err(NclError::InvalidArgument(format!("k_draws = {k_draws}, need at least {MIN_DRAWS}")));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(NclError::UnsortedGrid);
    }
    let design = synthesize(spec)?;
    let mu = design.mu_values;
    let n = mu.len();
    let phi = evaluate(basis, &design.dataset.features)?;
    let g = compute_gram(&phi, &mu)?;
    let wg = whiten(&g)?;

    let draws: Vec<Vec<f64>> = (0..k_draws)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let y = &mu + noise_draw(n, spec.sigma, &mut rng);
            let py = phi_y(&phi, &y)?;
            lambda_grid
                .iter()
                .map(|&l| true_error(&predict_ensemble(&fit_with_phi_y(&wg, &py, l)?, &phi)?, &mu))
                .collect()
        })
        .collect::<Result<_>>()?;

    let kf = k_draws as f64;
    let mean_true_err = lambda_grid
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let vals: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            let mean = vals.iter().sum::<f64>() / kf;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (kf - 1.0);
            Ok(TrueErrorStat {
                lambda,
                mean,
                std_error: (var / kf).sqrt(),
                expected: expected_true_error(&wg, &phi, &mu, spec.sigma, lambda)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let means: Vec<f64> = mean_true_err.iter().map(|s| s.mean).collect();
    let lambda_best = lambda_grid[argmin_prefer_last(&means)];
    Ok(Theorem6Report {
        sigma: spec.sigma,
        n,
        k_draws,
        mean_true_err,
        lambda_best,
        derivative_at_one: derivative_at_one(&wg, spec.sigma, n),
    })
}
