//! Degrees of freedom of NCL ensembles, noise-variance estimation and SURE.
//!
//! In terms of the eigenvalues `rho_q` of the whitened Gram matrix,
//! `df(lambda) = sum_q rho_q / (M(1 - lambda) + lambda rho_q)`, which rises
//! from `H` at `lambda = 0` to `rank(G)` at `lambda = 1`.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::FeatureMatrix;
use crate::error::{check_lambda, NclError, Result};
use crate::gram::{block_sandwich, spectral_gain, GramBundle, WhitenedGram};
use crate::linalg::zero_threshold;
use crate::ncl::{emp_error, fit, predict_ensemble};

fn check_spectrum(rho: &[f64], m: usize) -> Result<()> {
    if m == 0 {
        return Err(NclError::InvalidArgument("M must be positive".into()));
    }
    if rho.iter().any(|r| !r.is_finite()) {
        return Err(NclError::InvalidArgument("non-finite eigenvalue".into()));
    }
    Ok(())
}

/// Spectral form of the degrees of freedom. Eigenvalues at roundoff level
/// contribute nothing.
pub fn df_spectral(rho: &[f64], lambda: f64, m: usize) -> Result<f64> {
    check_lambda(lambda)?;
    check_spectrum(rho, m)?;
    let tol = zero_threshold(rho);
    let mf = m as f64;
    Ok(rho.iter().map(|&r| if r > tol { r * spectral_gain(r, lambda, mf, tol) } else { 0.0 }).sum())
}

/// `trace(G (M(1-lambda) D + lambda G)^+)`, evaluated through the whitener:
/// the pseudo-inverse is `W V diag(g) V^T W`, so the trace is
/// `sum_q g_q v_q^T (W G W) v_q` with `W G W` rebuilt from the raw Gram.
pub fn df_analytic(wg: &WhitenedGram, g: &GramBundle, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let sandwich = block_sandwich(&wg.whitener_blocks, &g.gram_full, g.h);
    let rotated = &sandwich * &wg.eigenvectors;
    let gains = wg.spectral_gains(lambda);
    Ok(wg
        .eigenvectors
        .column_iter()
        .zip(rotated.column_iter())
        .zip(gains.iter())
        .map(|((v, kv), gain)| gain * v.dot(&kv))
        .sum())
}

/// `d df / d lambda = sum_q rho_q (M - rho_q) / (M(1-lambda) + lambda rho_q)^2`.
pub fn df_derivative(rho: &[f64], lambda: f64, m: usize) -> Result<f64> {
    check_lambda(lambda)?;
    check_spectrum(rho, m)?;
    let tol = zero_threshold(rho);
    let mf = m as f64;
    Ok(rho
        .iter()
        .filter(|&&r| r > tol)
        .map(|&r| {
            let gain = spectral_gain(r, lambda, mf, tol);
            r * (mf - r) * gain * gain
        })
        .sum())
}

/// `d^2 df / d lambda^2 = 2 sum_q rho_q (M - rho_q)^2 / (M(1-lambda) + lambda rho_q)^3`.
pub fn df_second_derivative(rho: &[f64], lambda: f64, m: usize) -> Result<f64> {
    check_lambda(lambda)?;
    check_spectrum(rho, m)?;
    let tol = zero_threshold(rho);
    let mf = m as f64;
    Ok(rho
        .iter()
        .filter(|&&r| r > tol)
        .map(|&r| {
            let gain = spectral_gain(r, lambda, mf, tol);
            2.0 * r * (mf - r).powi(2) * gain.powi(3)
        })
        .sum())
}

/// Noise variance from the `lambda = 0` residuals: `sum r_n^2 / (N - H)`.
pub fn noise_variance(residuals: &DVector<f64>, h: usize) -> Result<f64> {
    let n = residuals.len();
    if n <= h {
        return Err(NclError::TooFewSamples { n, h });
    }
    Ok(residuals.norm_squared() / (n - h) as f64)
}

/// Stein's unbiased risk estimate `R_emp + sigma^2 (2 df / N - 1)`.
pub fn sure(emp_err: f64, df: f64, sigma_tilde_sq: f64, n: usize) -> f64 {
    emp_err + sigma_tilde_sq * (2.0 * df / n as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SureReport {
    pub lambda: f64,
    pub emp_err: f64,
    pub df: f64,
    pub sigma_tilde_sq: f64,
    pub sure_value: f64,
}

impl SureReport {
    pub fn new(lambda: f64, emp_err: f64, df: f64, sigma_tilde_sq: f64, n: usize) -> Self {
        Self { lambda, emp_err, df, sigma_tilde_sq, sure_value: sure(emp_err, df, sigma_tilde_sq, n) }
    }
}

/// Fit at `lambda = 0` and estimate the noise variance from its residuals.
pub fn estimate_noise_variance(wg: &WhitenedGram, g: &GramBundle, phi: &FeatureMatrix, y: &DVector<f64>) -> Result<f64> {
    let f0 = fit(wg, g, 0.0)?;
    let preds = predict_ensemble(&f0, phi)?;
    noise_variance(&(preds - y), g.h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfCurve {
    pub lambdas: Vec<f64>,
    pub df: Vec<f64>,
    pub emp_err: Vec<f64>,
    pub sure: Option<Vec<f64>>,
    pub sigma_tilde_sq: Option<f64>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    let in_range = grid.iter().all(|l| (0.0..=1.0).contains(l));
    let ascending = grid.windows(2).all(|w| w[0] < w[1]);
    if grid.is_empty() || !in_range || !ascending {
        return Err(NclError::UnsortedGrid);
    }
    Ok(())
}

/// Fit, df, training error and (optionally) SURE along an ascending grid.
pub fn df_curve(
    wg: &WhitenedGram,
    g: &GramBundle,
    phi: &FeatureMatrix,
    y: &DVector<f64>,
    grid: &[f64],
    sigma_tilde_sq: Option<f64>,
) -> Result<DfCurve> {
    check_grid(grid)?;
    let rho = wg.eigenvalues.as_slice();
    let mut df = Vec::with_capacity(grid.len());
    let mut emp = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let fe = fit(wg, g, lambda)?;
        emp.push(emp_error(&predict_ensemble(&fe, phi)?, y)?);
        df.push(df_spectral(rho, lambda, wg.m)?);
    }
    let sure = sigma_tilde_sq
        .map(|s2| df.iter().zip(&emp).map(|(&d, &e)| sure(e, d, s2, g.n)).collect());
    Ok(DfCurve { lambdas: grid.to_vec(), df, emp_err: emp, sure, sigma_tilde_sq })
}

impl DfCurve {
    /// Descriptions of every violated shape property: df nondecreasing, with
    /// second differences nonnegative on uniform stretches, and training
    /// error nonincreasing.
    pub fn shape_violations(&self, slack: f64) -> Vec<String> {
        let mut out = Vec::new();
        for i in 1..self.lambdas.len() {
            if self.df[i] < self.df[i - 1] - slack {
                out.push(format!("df decreases at lambda = {}", self.lambdas[i]));
            }
            if self.emp_err[i] > self.emp_err[i - 1] + slack {
                out.push(format!("training error increases at lambda = {}", self.lambdas[i]));
            }
        }
        for i in 1..self.lambdas.len().saturating_sub(1) {
            let (a, b, c) = (self.lambdas[i - 1], self.lambdas[i], self.lambdas[i + 1]);
            let uniform = ((b - a) - (c - b)).abs() <= 1e-12;
            if uniform && self.df[i + 1] - 2.0 * self.df[i] + self.df[i - 1] < -slack {
                out.push(format!("df not convex at lambda = {b}"));
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "df", "emp_err", "sure"])?;
        for i in 0..self.lambdas.len() {
            let sure = self.sure.as_ref().map(|s| format!("{:?}", s[i])).unwrap_or_default();
            w.write_record([
                format!("{:?}", self.lambdas[i]),
                format!("{:?}", self.df[i]),
                format!("{:?}", self.emp_err[i]),
                sure,
            ])?;
        }
        w.flush().map_err(|source| NclError::Io { path: "<csv>".into(), source })?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| NclError::Io { path: path.to_path_buf(), source })?;
        self.write_csv(file)
    }
}

/// `{1 - 10^-l : l = 2..=12}`, ascending.
pub fn near_one_grid() -> Vec<f64> {
    (2..=12).map(|l| 1.0 - 10f64.powi(-l)).collect()
}

/// `n` uniform points on `[0, 1]`.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// 101 uniform points plus the near-one refinement, sorted and deduplicated.
pub fn default_grid() -> Vec<f64> {
    merge_grids(&uniform_grid(101), &near_one_grid())
}

pub fn merge_grids(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup_by(|x, y| (*x - *y).abs() <= 1e-15);
    all
}
