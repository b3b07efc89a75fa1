//! Property suites behind `ncl verify`. Each suite builds small random
//! instances, checks the library against independent computations and
//! reports every violated property.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate, sample_rff, BasisEnsemble, FeatureMatrix};
use crate::data::{noise_draw, synthesize, GroundTruth, SynthSpec};
use crate::dof::{default_grid, df_analytic, df_curve, df_spectral, sure, uniform_grid};
use crate::error::Result;
use crate::gram::{compute_gram, phi_y, whiten, GramBundle, WhitenedGram};
use crate::mcdof::{estimate_df, NclOracle};
use crate::ncl::{ambiguity, emp_error, fit, fit_with_phi_y, ncl_loss, ncl_loss_mixed, predict_ensemble, true_error};
use crate::theorem6::{derivative_at_one, expected_true_error, run_theorem6};
use crate::tikhonov::equivalence_check;
use crate::tuning::{tune_cv_features, tune_sure_factored, TuneConfig};

pub const SUITES: [&str; 10] =
    ["gram", "ncl", "dof", "shapes", "sure", "tikhonov", "mcdof", "tuning", "theorem6", "ambiguity"];

/// Deliberate defects used to check that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Drop the `(1 - lambda)` factor from the df denominator.
    DfFormula,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
    pub seconds: f64,
}

impl VerifyReport {
    /// Plain-text table, one row per suite.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>6} {:>7} {:>8}\n", "suite", "status", "checks", "seconds");
        for s in &self.suites {
            let status = if s.passed { "pass" } else { "FAIL" };
            out.push_str(&format!("{:<10} {:>6} {:>7} {:>8.2}\n", s.name, status, s.checks, s.seconds));
            for f in &s.failures {
                out.push_str(&format!("    {f}\n"));
            }
        }
        out
    }
}

struct Checker {
    checks: usize,
    failures: Vec<String>,
}

impl Checker {
    fn new() -> Self {
        Self { checks: 0, failures: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok && self.failures.len() < 20 {
            self.failures.push(what());
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

struct Instance {
    y: DVector<f64>,
    mu: DVector<f64>,
    x: DMatrix<f64>,
    basis: BasisEnsemble,
    phi: FeatureMatrix,
    g: GramBundle,
    wg: WhitenedGram,
}

fn instance(n: usize, d: usize, h: usize, m: usize, gamma: f64, sigma: f64, seed: u64) -> Result<Instance> {
    let s = synthesize(&SynthSpec { n, d, mu: GroundTruth::SumOfSines, sigma, seed })?;
    let basis = sample_rff(d, h, m, gamma, seed ^ 0x5eed)?;
    let phi = evaluate(&basis, &s.dataset.features)?;
    let y = s.dataset.target(0);
    let g = compute_gram(&phi, &y)?;
    let wg = whiten(&g)?;
    Ok(Instance { x: s.dataset.features, y, mu: s.mu_values, basis, phi, g, wg })
}

/// Instance whose second half of members copies the first half.
fn rank_deficient_instance(n: usize, h: usize, m: usize, seed: u64) -> Result<Instance> {
    let s = synthesize(&SynthSpec { n, d: 2, mu: GroundTruth::SumOfSines, sigma: 0.3, seed })?;
    let half = sample_rff(2, h, m / 2, 1.0, seed + 1)?;
    let q2 = h * (m / 2);
    let freqs = DMatrix::from_fn(h * m, 2, |i, j| half.frequencies()[(i % q2, j)]);
    let phases = (0..h * m).map(|i| half.phases()[i % q2]).collect();
    let basis = BasisEnsemble::from_parts(h, m, 1.0, freqs, phases)?;
    let phi = evaluate(&basis, &s.dataset.features)?;
    let y = s.dataset.target(0);
    let g = compute_gram(&phi, &y)?;
    let wg = whiten(&g)?;
    Ok(Instance { x: s.dataset.features, y, mu: s.mu_values, basis, phi, g, wg })
}

fn block_diag(g: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| if i / h == j / h { g[(i, j)] } else { 0.0 })
}

/// `M(1-lambda) D + lambda G` from the raw Gram.
fn raw_system(g: &DMatrix<f64>, h: usize, m: usize, lambda: f64) -> DMatrix<f64> {
    block_diag(g, h) * (m as f64 * (1.0 - lambda)) + g * lambda
}

fn raw_smoother(inst: &Instance, lambda: f64) -> DMatrix<f64> {
    let a = raw_system(&inst.g.gram_full, inst.wg.h, inst.wg.m, lambda);
    let q = a.nrows();
    let pinv = a.pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(q, q));
    inst.phi.phi.transpose() * pinv * &inst.phi.phi / inst.phi.n() as f64
}

fn svd_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|&&s| s > a.nrows() as f64 * f64::EPSILON * max).count()
}

fn df_under_test(rho: &[f64], lambda: f64, m: usize, mutation: Mutation) -> Result<f64> {
    match mutation {
        Mutation::None => df_spectral(rho, lambda, m),
        Mutation::DfFormula => {
            let mf = m as f64;
            Ok(rho.iter().filter(|&&r| r > 1e-12).map(|&r| r / (mf + lambda * r)).sum())
        }
    }
}

fn suite_gram(c: &mut Checker) -> Result<()> {
    for seed in 0..20 {
        let (h, m) = ([2, 5][seed as usize % 2], [3, 10][(seed as usize / 2) % 2]);
        let inst = instance(200, 3, h, m, 1.0, 0.3, 100 + seed)?;
        let q = h * m;
        let phi = &inst.phi.phi;
        let brute = phi * phi.transpose() / phi.ncols() as f64;
        c.check((&brute - &inst.g.gram_full).amax() < 1e-12, || format!("seed {seed}: gram differs from definition"));
        let mf = m as f64;
        let rho = &inst.wg.eigenvalues;
        c.check(rho.iter().all(|&r| r >= 0.0 && r <= mf + 1e-8), || format!("seed {seed}: rho outside [0, M]"));
        let trace: f64 = rho.iter().sum();
        c.check(rel(trace, q as f64) < 1e-6, || format!("seed {seed}: trace {trace} != HM = {q}"));
        c.check(inst.wg.rank_p == svd_rank(&inst.g.gram_full), || format!("seed {seed}: rank_p disagrees with SVD rank"));
        let v = &inst.wg.eigenvectors;
        c.check((v.transpose() * v - DMatrix::identity(q, q)).amax() < 1e-10, || format!("seed {seed}: V not orthonormal"));
    }
    let inst = rank_deficient_instance(80, 3, 4, 7)?;
    c.check(inst.wg.rank_p == 6, || format!("duplicated members: rank {} != 6", inst.wg.rank_p));
    Ok(())
}

fn suite_ncl(c: &mut Checker) -> Result<()> {
    for seed in 0..5 {
        let inst = instance(60, 2, 3, 4, 1.0, 0.3, 200 + seed)?;
        for lambda in [0.0, 0.37, 0.8, 1.0] {
            let fe = fit(&inst.wg, &inst.g, lambda)?;
            let a = raw_system(&inst.g.gram_full, 3, 4, lambda);
            let beta = fe.beta_vector();
            // stationarity of the averaged loss in beta
            let grad = &a * &beta - &inst.g.phi_y;
            c.check(grad.amax() < 1e-8 * (1.0 + inst.g.phi_y.amax()), || {
                format!("seed {seed} lambda {lambda}: gradient {:.2e}", grad.amax())
            });
            if lambda < 1.0 {
                let direct = a.clone().pseudo_inverse(1e-13).map(|p| p * &inst.g.phi_y);
                if let Ok(direct) = direct {
                    let err = (&beta - &direct).norm() / direct.norm();
                    c.check(err < 1e-7, || format!("seed {seed} lambda {lambda}: beta off by {err:.2e}"));
                }
            }
        }
        let s1 = fit(&inst.wg, &inst.g, 1.0)?;
        let resid = predict_ensemble(&s1, &inst.phi)? - &inst.y;
        c.check((&inst.phi.phi * resid).amax() < 1e-8, || format!("seed {seed}: lambda = 1 residual not orthogonal"));
    }
    Ok(())
}

fn suite_dof(c: &mut Checker, mutation: Mutation) -> Result<()> {
    let grid = uniform_grid(21);
    for seed in 0..20 {
        let (h, m) = ([2, 5][seed as usize % 2], [3, 10][(seed as usize / 2) % 2]);
        let inst = instance(200, 3, h, m, 1.0, 0.3, 300 + seed)?;
        let rho = inst.wg.eigenvalues.as_slice();
        for &lambda in &grid {
            let a = df_under_test(rho, lambda, m, mutation)?;
            let b = df_analytic(&inst.wg, &inst.g, lambda)?;
            let t = raw_smoother(&inst, lambda).trace();
            c.check(rel(a, b) < 1e-8, || format!("seed {seed} lambda {lambda}: spectral {a} vs analytic {b}"));
            if lambda < 1.0 {
                c.check(rel(a, t) < 1e-8, || format!("seed {seed} lambda {lambda}: spectral {a} vs trace {t}"));
            }
        }
        let d0 = df_under_test(rho, 0.0, m, mutation)?;
        let d1 = df_under_test(rho, 1.0, m, mutation)?;
        c.check((d0 - h as f64).abs() < 1e-6, || format!("seed {seed}: df(0) = {d0}, H = {h}"));
        c.check((d1 - inst.wg.rank_p as f64).abs() < 1e-6, || format!("seed {seed}: df(1) = {d1}, rank = {}", inst.wg.rank_p));
    }
    Ok(())
}

fn suite_shapes(c: &mut Checker, mutation: Mutation) -> Result<()> {
    let grid = uniform_grid(21);
    for seed in 0..10 {
        let inst = instance(150, 3, 3, 6, 1.0, 0.5, 400 + seed)?;
        let curve = df_curve(&inst.wg, &inst.g, &inst.phi, &inst.y, &grid, None)?;
        for v in curve.shape_violations(1e-9) {
            c.check(false, || format!("seed {seed}: {v}"));
        }
        c.checks += 1;
        let rho = inst.wg.eigenvalues.as_slice();
        let df: Vec<f64> = grid.iter().map(|&l| df_under_test(rho, l, 6, mutation)).collect::<Result<_>>()?;
        c.check(df.windows(2).all(|w| w[1] > w[0]), || format!("seed {seed}: df not strictly increasing"));
        c.check(df.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] > 0.0), || format!("seed {seed}: df not strictly convex"));
        let e = &curve.emp_err;
        c.check(e.windows(2).all(|w| w[1] < w[0]), || format!("seed {seed}: training error not strictly decreasing"));
    }
    // noisy data: held-out error rises again toward lambda = 1
    let grid = default_grid();
    let train = instance(500, 3, 15, 10, 4.0, 0.5, 1)?;
    let test = synthesize(&SynthSpec { n: 2000, d: 3, mu: GroundTruth::SumOfSines, sigma: 0.0, seed: 2 })?;
    let phi_test = evaluate(&train.basis, &test.dataset.features)?;
    let errs: Vec<f64> = grid
        .iter()
        .map(|&l| true_error(&predict_ensemble(&fit(&train.wg, &train.g, l)?, &phi_test)?, &test.mu_values))
        .collect::<Result<_>>()?;
    let best = errs.iter().copied().fold(f64::INFINITY, f64::min);
    let last = *errs.last().unwrap_or(&best);
    c.check(last > best * 1.01, || format!("test error at lambda = 1 ({last}) does not exceed the best ({best})"));
    Ok(())
}

fn suite_sure(c: &mut Checker) -> Result<()> {
    let n = 300;
    let sigma = 0.5;
    let inst = instance(n, 2, 4, 5, 1.0, 0.0, 500)?;
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let draws: Vec<DVector<f64>> = (0..200).map(|_| &inst.mu + noise_draw(n, sigma, &mut rng)).collect();
    for lambda in [0.0, 0.5, 0.9, 1.0] {
        let df = df_spectral(inst.wg.eigenvalues.as_slice(), lambda, 5)?;
        let diffs: Vec<f64> = draws
            .iter()
            .map(|y| {
                let preds = predict_ensemble(&fit_with_phi_y(&inst.wg, &phi_y(&inst.phi, y)?, lambda)?, &inst.phi)?;
                Ok(sure(emp_error(&preds, y)?, df, sigma * sigma, n) - true_error(&preds, &inst.mu)?)
            })
            .collect::<Result<_>>()?;
        let k = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / k;
        let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        c.check(mean.abs() <= 3.0 * se, || format!("lambda {lambda}: SURE bias {mean:.3e} > 3 se {se:.3e}"));
    }
    Ok(())
}

fn suite_tikhonov(c: &mut Checker) -> Result<()> {
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    for seed in 0..10 {
        let inst = if seed == 9 { rank_deficient_instance(60, 3, 4, 600)? } else { instance(60, 2, 3, 4, 1.0, 0.3, 600 + seed)? };
        for p in equivalence_check(&inst.x, &inst.y, &inst.basis, &grid, seed)? {
            c.check(p.max_deviation <= 1e-6, || format!("seed {seed} lambda {}: deviation {:.2e}", p.lambda, p.max_deviation));
        }
    }
    Ok(())
}

fn suite_mcdof(c: &mut Checker, mutation: Mutation) -> Result<()> {
    let inst = instance(150, 2, 3, 6, 1.0, 0.3, 700)?;
    for lambda in [0.0, 0.5, 0.9, 1.0] {
        let oracle = NclOracle { wg: &inst.wg, phi: &inst.phi, lambda };
        let est = estimate_df(&oracle, &inst.y, 1e-3, 200, 701)?;
        let exact = df_under_test(inst.wg.eigenvalues.as_slice(), lambda, 6, mutation)?;
        let tol = (0.02 * exact).max(3.0 * est.std_error);
        c.check((est.value - exact).abs() <= tol, || format!("lambda {lambda}: estimate {} vs df {exact}", est.value));
    }
    let oracle = NclOracle { wg: &inst.wg, phi: &inst.phi, lambda: 0.7 };
    let vals: Vec<f64> = [1e-1, 1e-3, 1e-6]
        .iter()
        .map(|&e| estimate_df(&oracle, &inst.y, e, 50, 702).map(|r| r.value))
        .collect::<Result<_>>()?;
    c.check(vals.iter().all(|v| rel(*v, vals[0]) < 1e-6), || format!("estimates depend on epsilon: {vals:?}"));
    Ok(())
}

fn suite_tuning(c: &mut Checker) -> Result<()> {
    let noisy = instance(500, 2, 5, 10, 1.0, 1.0, 800)?;
    let cfg = TuneConfig::default();
    let r = tune_sure_factored(&noisy.wg, &noisy.phi, &noisy.y, &cfg)?;
    c.check(r.lambda_star < 1.0 - cfg.xtol, || format!("noisy data: SURE lambda* = {}", r.lambda_star));
    let min = r.trace.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    c.check(r.criterion_value <= min + 1e-12, || "criterion value above trace minimum".into());
    let again = tune_sure_factored(&noisy.wg, &noisy.phi, &noisy.y, &cfg)?;
    c.check(again.trace == r.trace, || "SURE trace not reproducible".into());

    let clean = instance(300, 2, 3, 5, 1.0, 0.0, 801)?;
    let beta = DVector::from_fn(15, |i, _| ((i * 13) % 7) as f64 / 7.0 - 0.4);
    let y = clean.phi.phi.tr_mul(&beta);
    let r0 = tune_sure_factored(&clean.wg, &clean.phi, &y, &TuneConfig { sigma_sq: Some(0.0), ..cfg.clone() })?;
    c.check(r0.lambda_star >= 1.0 - cfg.xtol, || format!("realizable noiseless data: lambda* = {}", r0.lambda_star));

    let a = tune_cv_features(&noisy.phi, &noisy.y, 5, 3, &cfg)?;
    let b = tune_cv_features(&noisy.phi, &noisy.y, 5, 3, &TuneConfig { parallel: true, ..cfg })?;
    c.check(a.trace == b.trace, || "CV trace depends on parallelism".into());
    Ok(())
}

fn suite_theorem6(c: &mut Checker) -> Result<()> {
    let grid = default_grid();
    let basis = sample_rff(3, 15, 10, 4.0, 2)?;
    let clean = SynthSpec { n: 500, d: 3, mu: GroundTruth::SumOfSines, sigma: 0.0, seed: 1 };
    let r0 = run_theorem6(&clean, &basis, &grid, 50, 1)?;
    c.check(r0.lambda_best == 1.0, || format!("sigma = 0: lambda_best = {}", r0.lambda_best));
    let noisy = SynthSpec { sigma: 0.5, ..clean };
    let r = run_theorem6(&noisy, &basis, &grid, 200, 1)?;
    c.check(r.lambda_best < 1.0, || format!("sigma = 0.5: lambda_best = {}", r.lambda_best));
    if let (Some(best), Some(last)) =
        (r.mean_true_err.iter().find(|s| s.lambda == r.lambda_best), r.mean_true_err.last())
    {
        let combined = (best.std_error.powi(2) + last.std_error.powi(2)).sqrt();
        c.check(last.mean - best.mean > 2.0 * combined, || {
            format!("gap {:.3e} within 2 combined se {combined:.3e}", last.mean - best.mean)
        });
    }
    c.check(r.derivative_at_one > 0.0, || "slope at lambda = 1 not positive".into());

    // slope against the exact expected risk on a well-conditioned design
    let inst = instance(150, 2, 3, 4, 1.0, 0.5, 80)?;
    let risk = |l: f64| expected_true_error(&inst.wg, &inst.phi, &inst.mu, 0.5, l);
    let back = |h: f64| -> Result<f64> { Ok((risk(1.0)? - risk(1.0 - h)?) / h) };
    let fd = 2.0 * back(5e-9)? - back(1e-8)?;
    let formula = derivative_at_one(&inst.wg, 0.5, 150);
    c.check(rel(fd, formula) < 1e-4, || format!("slope at one: formula {formula} vs finite difference {fd}"));
    Ok(())
}

fn suite_ambiguity(c: &mut Checker) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    for _ in 0..10_000 {
        let m = rng.random_range(1..10);
        let preds: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y = rng.random_range(-10.0..10.0);
        let lambda = rng.random_range(0.0..=1.0);
        let r = ambiguity(&preds, y);
        let gap = (r.ensemble_error - (r.average_member_error - r.diversity)).abs();
        c.check(gap <= 1e-12 * (1.0 + r.average_member_error), || format!("ambiguity gap {gap:.2e}"));
        let a = ncl_loss(&preds, y, lambda);
        let b = ncl_loss_mixed(&preds, y, lambda);
        c.check((a - b).abs() <= 1e-12 * (1.0 + a.abs()), || format!("loss forms differ by {:.2e}", (a - b).abs()));
    }
    Ok(())
}

fn run_suite(name: &str, mutation: Mutation) -> SuiteResult {
    let start = Instant::now();
    let mut c = Checker::new();
    let outcome = match name {
        "gram" => suite_gram(&mut c),
        "ncl" => suite_ncl(&mut c),
        "dof" => suite_dof(&mut c, mutation),
        "shapes" => suite_shapes(&mut c, mutation),
        "sure" => suite_sure(&mut c),
        "tikhonov" => suite_tikhonov(&mut c),
        "mcdof" => suite_mcdof(&mut c, mutation),
        "tuning" => suite_tuning(&mut c),
        "theorem6" => suite_theorem6(&mut c),
        "ambiguity" => suite_ambiguity(&mut c),
        other => {
            c.failures.push(format!("unknown suite {other}"));
            Ok(())
        }
    };
    if let Err(e) = outcome {
        c.failures.push(format!("error: {e}"));
    }
    SuiteResult {
        name: name.to_string(),
        passed: c.failures.is_empty(),
        checks: c.checks,
        failures: c.failures,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Run the named suites (all of [`SUITES`] when `only` is empty).
pub fn run_verify(only: &[String], mutation: Mutation) -> VerifyReport {
    let start = Instant::now();
    let names: Vec<String> =
        if only.is_empty() { SUITES.iter().map(|s| s.to_string()).collect() } else { only.to_vec() };
    let suites: Vec<SuiteResult> = names.iter().map(|n| run_suite(n, mutation)).collect();
    let passed = suites.iter().all(|s| s.passed);
    VerifyReport { suites, passed, seconds: start.elapsed().as_secs_f64() }
}
