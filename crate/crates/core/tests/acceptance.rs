//! Acceptance criteria 1 to 12. Runs without the libtest harness so every
//! criterion prints its own PASS/FAIL line; exits non-zero if any fail.

mod common;

use std::time::{Duration, Instant};

use common::*;
use nalgebra::DVector;
use ncl::basis::{evaluate, frequency_heuristic, sample_rff};
use ncl::data::{noise_draw, synthesize, GroundTruth, SynthSpec};
use ncl::dof::{default_grid, df_analytic, df_spectral, sure, uniform_grid};
use ncl::gram::{compute_gram, phi_y, whiten};
use ncl::mcdof::{estimate_df, NclOracle};
use ncl::ncl::{
    ambiguity, emp_error, fit, fit_with_phi_y, predict_ensemble, smoother_matrix, true_error,
};
use ncl::theorem6::{derivative_at_one, expected_true_error, run_theorem6};
use ncl::tikhonov::equivalence_check;
use ncl::tuning::{tune_cv_features, tune_sure_features, TuneConfig};
use ncl::verify::{run_verify, Mutation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(limit: Duration, start: Instant) -> (bool, f64) {
    let t = start.elapsed();
    (t <= limit, t.as_secs_f64())
}

/// The 20 instances shared by criteria 1 and 2: N = 200, H in {2, 5}, M in {3, 10}.
fn df_instances() -> Vec<Instance> {
    (0..20u64)
        .map(|i| {
            let h = [2, 5][i as usize % 2];
            let m = [3, 10][(i as usize / 2) % 2];
            random_instance(200, 3, h, m, 0.3, 1000 + i)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let grid = uniform_grid(21);
    let mut worst: f64 = 0.0;
    for inst in df_instances() {
        for &lambda in &grid {
            let a = df_spectral(inst.wg.eigenvalues.as_slice(), lambda, inst.m()).unwrap();
            let b = df_analytic(&inst.wg, &inst.g, lambda).unwrap();
            let c = smoother_matrix(&inst.wg, &inst.phi, lambda).unwrap().s.trace();
            worst = worst.max(rel_diff(a, b)).max(rel_diff(a, c));
            if lambda < 1.0 {
                let d = direct_smoother(&inst.phi.phi, inst.h(), inst.m(), lambda).trace();
                worst = worst.max(rel_diff(a, d));
            }
        }
    }
    let (fast, secs) = within(Duration::from_secs(30), start);
    outcome(worst <= 1e-8 && fast, format!("max relative gap {worst:.2e} (limit 1e-8), {secs:.1}s (limit 30s)"))
}

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    for inst in df_instances() {
        let rho = inst.wg.eigenvalues.as_slice();
        let d0 = df_spectral(rho, 0.0, inst.m()).unwrap();
        let d1 = df_spectral(rho, 1.0, inst.m()).unwrap();
        let rank = svd_rank(&inst.g.gram_full) as f64;
        worst = worst.max((d0 - inst.h() as f64).abs()).max((d1 - rank).abs());
    }
    outcome(worst <= 1e-6, format!("max endpoint error {worst:.2e} (limit 1e-6)"))
}

fn criterion_3() -> Outcome {
    let grid = uniform_grid(21);
    let mut bad = Vec::new();
    for (i, inst) in df_instances().iter().enumerate() {
        let rho = inst.wg.eigenvalues.as_slice();
        let df: Vec<f64> = grid.iter().map(|&l| df_spectral(rho, l, inst.m()).unwrap()).collect();
        let emp: Vec<f64> = grid
            .iter()
            .map(|&l| emp_error(&predict_ensemble(&fit(&inst.wg, &inst.g, l).unwrap(), &inst.phi).unwrap(), &inst.y).unwrap())
            .collect();
        if !df.windows(2).all(|w| w[1] >= w[0]) {
            bad.push(format!("instance {i}: df decreases"));
        }
        if !df.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= -1e-9) {
            bad.push(format!("instance {i}: negative second difference"));
        }
        if !emp.windows(2).all(|w| w[1] <= w[0] + 1e-9) {
            bad.push(format!("instance {i}: training error increases"));
        }
        // strict versions: every instance here has H < rank
        if inst.wg.rank_p > inst.h() {
            let strict = df.windows(2).all(|w| w[1] > w[0])
                && df.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] > 0.0)
                && emp.windows(2).all(|w| w[1] < w[0]);
            if !strict {
                bad.push(format!("instance {i}: strict monotonicity or convexity fails"));
            }
        } else {
            bad.push(format!("instance {i}: not engineered with H < rank"));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "20 instances, weak and strict shapes hold".into() } else { bad.join("; ") })
}

fn criterion_4() -> Outcome {
    let mut worst_upper = f64::NEG_INFINITY;
    let mut worst_lower = f64::INFINITY;
    let mut worst_trace: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = rng.random_range(1..6);
        let m = rng.random_range(1..12);
        let inst = random_instance(150, 3, h, m, 0.3, 2000 + seed);
        let rho = &inst.wg.eigenvalues;
        worst_upper = worst_upper.max(rho.max() - m as f64);
        worst_lower = worst_lower.min(rho.min());
        worst_trace = worst_trace.max(rel_diff(rho.sum(), (h * m) as f64));
    }
    let pass = worst_lower >= 0.0 && worst_upper <= 1e-8 && worst_trace <= 1e-6;
    outcome(
        pass,
        format!("min rho {worst_lower:.2e}, max rho - M {worst_upper:.2e}, trace gap {worst_trace:.2e} (limits 0, 1e-8, 1e-6)"),
    )
}

fn criterion_5() -> Outcome {
    let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let inst = if i == 9 {
            half_duplicated_instance(80, 2, 3, 4, 3000)
        } else {
            random_instance(80, 2, 3, 4, 0.3, 3000 + i)
        };
        for p in equivalence_check(&inst.x, &inst.y, &inst.basis, &grid, i).unwrap() {
            worst = worst.max(p.max_deviation);
        }
    }
    outcome(worst <= 1e-6, format!("max relative deviation {worst:.2e} over 10 instances, one rank deficient (limit 1e-6)"))
}

/// Fixed design of criteria 6 and 7: N = 500, d = 3, H = 15, M = 10.
fn fixed_design() -> (SynthSpec, ncl::basis::BasisEnsemble) {
    let spec = SynthSpec { n: 500, d: 3, mu: GroundTruth::SumOfSines, sigma: 0.5, seed: 1 };
    (spec, sample_rff(3, 15, 10, 4.0, 2).unwrap())
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let (spec, basis) = fixed_design();
    let design = synthesize(&SynthSpec { sigma: 0.0, ..spec.clone() }).unwrap();
    let mu = design.mu_values;
    let phi = evaluate(&basis, &design.dataset.features).unwrap();
    let wg = whiten(&compute_gram(&phi, &mu).unwrap()).unwrap();
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws: Vec<DVector<f64>> = (0..200).map(|_| &mu + noise_draw(n, spec.sigma, &mut rng)).collect();
    let mut worst = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for lambda in [0.0, 0.5, 0.9, 1.0] {
        let df = df_spectral(wg.eigenvalues.as_slice(), lambda, 10).unwrap();
        let diffs: Vec<f64> = draws
            .iter()
            .map(|y| {
                let fe = fit_with_phi_y(&wg, &phi_y(&phi, y).unwrap(), lambda).unwrap();
                let preds = predict_ensemble(&fe, &phi).unwrap();
                sure(emp_error(&preds, y).unwrap(), df, spec.sigma * spec.sigma, n) - true_error(&preds, &mu).unwrap()
            })
            .collect();
        let k = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / k;
        let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
        worst = worst.max(mean.abs() / se);
        parts.push(format!("{lambda}: {:.2}se", mean.abs() / se));
    }
    let (fast, secs) = within(Duration::from_secs(120), start);
    outcome(worst <= 3.0 && fast, format!("|mean SURE - mean R_true| at {} (limit 3se), {secs:.1}s (limit 120s)", parts.join(", ")))
}

fn criterion_7() -> Outcome {
    let grid = default_grid();
    let (spec, basis) = fixed_design();
    let noisy = run_theorem6(&spec, &basis, &grid, 200, 7).unwrap();
    let clean = run_theorem6(&SynthSpec { sigma: 0.0, ..spec.clone() }, &basis, &grid, 50, 7).unwrap();
    let best = noisy.mean_true_err.iter().find(|s| s.lambda == noisy.lambda_best).unwrap();
    let last = noisy.mean_true_err.last().unwrap();
    let combined = (best.std_error.powi(2) + last.std_error.powi(2)).sqrt();
    let gap_se = (last.mean - best.mean) / combined;
    let direction = noisy.lambda_best < 1.0 && gap_se > 2.0 && clean.lambda_best == 1.0;

    // Slope at lambda = 1 against the exact expected risk, on a design whose
    // smallest rho keeps one-sided differences accurate.
    let inst = random_instance(150, 2, 3, 4, 0.5, 80);
    let risk = |l: f64| expected_true_error(&inst.wg, &inst.phi, &inst.mu, 0.5, l).unwrap();
    let back = |h: f64| (risk(1.0) - risk(1.0 - h)) / h;
    let fd = 2.0 * back(5e-9) - back(1e-8);
    let formula = derivative_at_one(&inst.wg, 0.5, 150);
    let inverse_sum: f64 = inst.wg.eigenvalues.iter().filter(|&&r| r > inst.wg.zero_tol).map(|r| 1.0 / r).sum();
    let bare = 2.0 * 0.25 / 150.0 * inverse_sum;
    let slope_ok = rel_diff(fd, formula) <= 1e-4 && formula > 0.0;
    outcome(
        direction && slope_ok,
        format!(
            "sigma=0.5: lambda_best {} beats lambda=1 by {gap_se:.1} combined se (limit 2); sigma=0: lambda_best {}; \
             slope at 1: (2s^2/N)sum (M-rho)/rho = {formula:.4} vs finite difference {fd:.4}; bare (2s^2/N)sum 1/rho = {bare:.4} does not match",
            noisy.lambda_best, clean.lambda_best
        ),
    )
}

fn criterion_8() -> Outcome {
    let inst = random_instance(200, 2, 3, 6, 0.3, 8000);
    let mut parts = Vec::new();
    let mut pass = true;
    for lambda in [0.0, 0.5, 0.9, 1.0] {
        let oracle = NclOracle { wg: &inst.wg, phi: &inst.phi, lambda };
        let est = estimate_df(&oracle, &inst.y, 1e-3, 200, 8).unwrap();
        let exact = df_spectral(inst.wg.eigenvalues.as_slice(), lambda, 6).unwrap();
        let tol = (0.02 * exact).max(3.0 * est.std_error);
        pass &= (est.value - exact).abs() <= tol;
        parts.push(format!("{lambda}: {:.3} vs {exact:.3}", est.value));
    }
    let oracle = NclOracle { wg: &inst.wg, phi: &inst.phi, lambda: 0.5 };
    let vals: Vec<f64> =
        [1e-1, 1e-3, 1e-6].iter().map(|&e| estimate_df(&oracle, &inst.y, e, 200, 9).unwrap().value).collect();
    let spread = vals.iter().map(|v| rel_diff(*v, vals[0])).fold(0.0, f64::max);
    pass &= spread <= 1e-6;
    outcome(pass, format!("{}; epsilon spread {spread:.2e}", parts.join(", ")))
}

fn criterion_9() -> Outcome {
    let inst = random_instance(20, 2, 2, 3, 0.2, 5);
    let lambda = 0.37;
    let beta = fit(&inst.wg, &inst.g, lambda).unwrap().beta_vector();
    let gd = gradient_descent_beta(&inst.phi.phi, &inst.y, 2, 3, lambda, 200_000);
    let rms = ((beta - gd).norm_squared() / 6.0).sqrt();
    outcome(rms <= 1e-4, format!("RMS gap to gradient descent {rms:.2e} (limit 1e-4)"))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let m = rng.random_range(1..16);
        let preds: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y = rng.random_range(-10.0..10.0);
        let r = ambiguity(&preds, y);
        let mf = m as f64;
        let f = preds.iter().sum::<f64>() / mf;
        let lhs = (f - y).powi(2);
        let avg = preds.iter().map(|p| (p - y).powi(2)).sum::<f64>() / mf;
        let div = preds.iter().map(|p| (p - f).powi(2)).sum::<f64>() / mf;
        worst = worst.max((lhs - (avg - div)).abs()).max((r.ensemble_error - (r.average_member_error - r.diversity)).abs());
    }
    outcome(worst <= 1e-12, format!("max identity gap {worst:.2e} over 10^4 tuples (limit 1e-12)"))
}

fn criterion_11() -> Outcome {
    let d = 8;
    let train = synthesize(&SynthSpec { n: 2000, d, mu: GroundTruth::SumOfSines, sigma: 0.5, seed: 11 }).unwrap();
    let test = synthesize(&SynthSpec { n: 2000, d, mu: GroundTruth::SumOfSines, sigma: 0.5, seed: 12 }).unwrap();
    let gamma = frequency_heuristic(&train.dataset.features, 11).unwrap();
    let basis = sample_rff(d, 10, 100, gamma, 13).unwrap();
    let phi = evaluate(&basis, &train.dataset.features).unwrap();
    let phi_test = evaluate(&basis, &test.dataset.features).unwrap();
    let y = train.dataset.target(0);
    let cfg = TuneConfig::default();

    let t = Instant::now();
    let s = tune_sure_features(&phi, &y, &cfg).unwrap();
    let time_sure = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let c = tune_cv_features(&phi, &y, 5, 11, &cfg).unwrap();
    let time_cv = t.elapsed().as_secs_f64();

    let g = compute_gram(&phi, &y).unwrap();
    let wg = whiten(&g).unwrap();
    let y_test = test.dataset.target(0);
    let err = |l: f64| emp_error(&predict_ensemble(&fit(&wg, &g, l).unwrap(), &phi_test).unwrap(), &y_test).unwrap();
    let (e_sure, e_cv) = (err(s.lambda_star), err(c.lambda_star));
    let rel_gap = rel_diff(e_sure, e_cv);
    let pass = time_sure <= time_cv / 3.0 && rel_gap <= 0.10;
    outcome(
        pass,
        format!(
            "SURE {time_sure:.2}s vs CV {time_cv:.2}s (ratio {:.1}, limit 3); test MSE {e_sure:.4} vs {e_cv:.4}, gap {:.1}% (limit 10%)",
            time_cv / time_sure,
            100.0 * rel_gap
        ),
    )
}

fn criterion_12() -> Outcome {
    let start = Instant::now();
    let report = run_verify(&[], Mutation::None);
    let (fast, secs) = within(Duration::from_secs(300), start);
    let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    outcome(
        report.passed && fast,
        format!("{} suites, failed: {:?}, {secs:.1}s (limit 300s)", report.suites.len(), failed),
    )
}

fn main() {
    // libtest flags such as --nocapture or --list are accepted and ignored
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("three-way df agreement", criterion_1),
        ("df endpoints", criterion_2),
        ("df and training error shapes", criterion_3),
        ("spectral bounds", criterion_4),
        ("ridge equivalence", criterion_5),
        ("SURE unbiasedness", criterion_6),
        ("noisy optimum below one", criterion_7),
        ("Monte-Carlo df", criterion_8),
        ("closed form vs gradient descent", criterion_9),
        ("ambiguity identity", criterion_10),
        ("tuning speed", criterion_11),
        ("verify suites", criterion_12),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!("criterion {:>2} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
