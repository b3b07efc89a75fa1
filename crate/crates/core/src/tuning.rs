//! Choosing the diversity parameter: Brent minimisation of either SURE or
//! k-fold cross-validation error, plus a nested benchmark comparing both.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{evaluate, frequency_heuristic, sample_rff, BasisEnsemble, FeatureMatrix};
use crate::data::{complement, kfold_indices, Dataset, StandardizationParams};
use crate::dof::{df_spectral, noise_variance, SureReport};
use crate::error::{NclError, Result};
use crate::gram::{compute_gram, phi_y, whiten, WhitenedGram};
use crate::ncl::{emp_error, fit_with_phi_y, predict_ensemble, FittedEnsemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrentResult {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
    pub converged: bool,
    /// Every `(x, f(x))` evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Bounded Brent minimisation (golden section with parabolic steps) on the
/// closed interval `[a, b]`. After the interior search both endpoints are
/// evaluated as well so boundary minima are found exactly.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, xtol: f64, max_iter: usize) -> Result<BrentResult> {
    try_brent_minimize(|x| Ok(f(x)), a, b, xtol, max_iter)
}

/// [`brent_minimize`] for fallible objectives; the first error aborts.
pub fn try_brent_minimize<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<BrentResult> {
    if !(a < b) || !a.is_finite() || !b.is_finite() {
        return Err(NclError::InvalidArgument(format!("bracket [{a}, {b}] is empty")));
    }
    if !(xtol > 0.0) || max_iter < 3 {
        return Err(NclError::InvalidArgument("need xtol > 0 and max_iter >= 3".into()));
    }
    let (lo, hi) = (a, b);
    let mut trace = Vec::new();
    let mut eval = |x: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
        let x = x.clamp(lo, hi);
        let fx = f(x)?;
        trace.push((x, fx));
        Ok(fx)
    };

    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let sqrt_eps = f64::EPSILON.sqrt();
    let interior_budget = max_iter - 2;
    let (mut a, mut b) = (a, b);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = eval(x, &mut trace)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0_f64, 0.0_f64);
    let mut converged = false;

    loop {
        let xm = 0.5 * (a + b);
        let tol1 = sqrt_eps * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            converged = true;
            break;
        }
        if trace.len() >= interior_budget {
            break;
        }
        let mut take_golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                take_golden = false;
            }
        }
        if take_golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = eval(u, &mut trace)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    for end in [lo, hi] {
        let fe = eval(end, &mut trace)?;
        if fe < fx {
            x = end;
            fx = fe;
        }
    }
    Ok(BrentResult { x, fx, evaluations: trace.len(), converged, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMethod {
    Sure,
    Cv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub xtol: f64,
    pub max_iter: usize,
    /// Target column of the dataset to tune for.
    pub target: usize,
    /// Known noise variance; estimated from the `lambda = 0` fit when absent.
    pub sigma_sq: Option<f64>,
    /// Build per-fold factorizations in parallel.
    pub parallel: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self { xtol: 1e-4, max_iter: 100, target: 0, sigma_sq: None, parallel: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda_star: f64,
    pub criterion_value: f64,
    pub method: TuneMethod,
    pub evaluations: usize,
    pub converged: bool,
    /// Seconds spent building factorizations and minimising.
    pub wall_time: f64,
    /// Gram constructions plus eigendecompositions performed.
    pub factorizations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_tilde_sq: Option<f64>,
    pub trace: Vec<(f64, f64)>,
}

/// SURE as a function of lambda for one target vector over a fixed
/// factorization.
pub struct SureObjective<'a> {
    wg: &'a WhitenedGram,
    phi: &'a FeatureMatrix,
    y: &'a DVector<f64>,
    phi_y: DVector<f64>,
    sigma_sq: f64,
}

impl<'a> SureObjective<'a> {
    pub fn new(wg: &'a WhitenedGram, phi: &'a FeatureMatrix, y: &'a DVector<f64>, sigma_sq: Option<f64>) -> Result<Self> {
        let py = phi_y(phi, y)?;
        let sigma_sq = match sigma_sq {
            Some(s) => s,
            None => {
                let f0 = fit_with_phi_y(wg, &py, 0.0)?;
                noise_variance(&(predict_ensemble(&f0, phi)? - y), wg.h)?
            }
        };
        Ok(Self { wg, phi, y, phi_y: py, sigma_sq })
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn fit(&self, lambda: f64) -> Result<FittedEnsemble> {
        fit_with_phi_y(self.wg, &self.phi_y, lambda)
    }

    pub fn report(&self, lambda: f64) -> Result<SureReport> {
        let fe = self.fit(lambda)?;
        let emp = emp_error(&predict_ensemble(&fe, self.phi)?, self.y)?;
        let df = df_spectral(self.wg.eigenvalues.as_slice(), lambda, self.wg.m)?;
        Ok(SureReport::new(lambda, emp, df, self.sigma_sq, self.y.len()))
    }

    pub fn value(&self, lambda: f64) -> Result<f64> {
        Ok(self.report(lambda)?.sure_value)
    }

    pub fn minimize(&self, config: &TuneConfig) -> Result<BrentResult> {
        try_brent_minimize(|l| self.value(l), 0.0, 1.0, config.xtol, config.max_iter)
    }
}

/// Tune lambda by SURE over a precomputed factorization.
pub fn tune_sure_factored(wg: &WhitenedGram, phi: &FeatureMatrix, y: &DVector<f64>, config: &TuneConfig) -> Result<TuneResult> {
    let start = Instant::now();
    let obj = SureObjective::new(wg, phi, y, config.sigma_sq)?;
    let br = obj.minimize(config)?;
    Ok(TuneResult {
        lambda_star: br.x,
        criterion_value: br.fx,
        method: TuneMethod::Sure,
        evaluations: br.evaluations,
        converged: br.converged,
        wall_time: start.elapsed().as_secs_f64(),
        factorizations: 0,
        sigma_tilde_sq: Some(obj.sigma_sq),
        trace: br.trace,
    })
}

/// SURE tuning on precomputed features: one Gram construction, one
/// eigendecomposition, then only O(Q^2 + QN) work per criterion call.
pub fn tune_sure_features(phi: &FeatureMatrix, y: &DVector<f64>, config: &TuneConfig) -> Result<TuneResult> {
    let start = Instant::now();
    let g = compute_gram(phi, y)?;
    let wg = whiten(&g)?;
    let mut res = tune_sure_factored(&wg, phi, y, config)?;
    res.factorizations = 1;
    res.wall_time = start.elapsed().as_secs_f64();
    Ok(res)
}

pub fn tune_sure(train: &Dataset, basis: &BasisEnsemble, config: &TuneConfig) -> Result<TuneResult> {
    let phi = evaluate(basis, &train.features)?;
    tune_sure_features(&phi, &target_column(train, config.target)?, config)
}

fn target_column(ds: &Dataset, col: usize) -> Result<DVector<f64>> {
    if col >= ds.t() {
        return Err(NclError::InvalidArgument(format!("target column {col} out of range ({} targets)", ds.t())));
    }
    Ok(ds.target(col))
}

struct Fold {
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    wg: WhitenedGram,
    phi_train: FeatureMatrix,
    phi_val: FeatureMatrix,
}

/// Per-fold factorizations for k-fold CV over a fixed feature matrix. They
/// depend only on the design, so every target column and every lambda
/// evaluation reuses them.
pub struct CvFolds {
    folds: Vec<Fold>,
}

impl CvFolds {
    pub fn new(phi: &FeatureMatrix, validation_sets: &[Vec<usize>], parallel: bool) -> Result<Self> {
        let n = phi.n();
        let build = |(i, val): (usize, &Vec<usize>)| -> Result<Fold> {
            let train_idx = complement(n, val);
            if train_idx.len() <= phi.h {
                return Err(NclError::FoldTooSmall { fold: i, n: train_idx.len(), h: phi.h });
            }
            let phi_train = phi.select(&train_idx);
            let g = compute_gram(&phi_train, &DVector::zeros(train_idx.len()))?;
            let wg = whiten(&g)?;
            Ok(Fold { phi_val: phi.select(val), val_idx: val.clone(), train_idx, wg, phi_train })
        };
        let folds = if parallel {
            validation_sets.par_iter().enumerate().map(build).collect::<Result<Vec<_>>>()?
        } else {
            validation_sets.iter().enumerate().map(build).collect::<Result<Vec<_>>>()?
        };
        Ok(Self { folds })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Bind a target vector (over all N design points).
    pub fn objective<'a>(&'a self, y: &DVector<f64>) -> Result<CvObjective<'a>> {
        let per_fold = self
            .folds
            .iter()
            .map(|f| {
                let y_tr = y.select_rows(&f.train_idx);
                Ok((phi_y(&f.phi_train, &y_tr)?, y.select_rows(&f.val_idx)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CvObjective { folds: self, per_fold })
    }
}

pub struct CvObjective<'a> {
    folds: &'a CvFolds,
    per_fold: Vec<(DVector<f64>, DVector<f64>)>,
}

impl CvObjective<'_> {
    /// Mean validation MSE over folds.
    pub fn value(&self, lambda: f64) -> Result<f64> {
        let mut total = 0.0;
        for (fold, (py, y_val)) in self.folds.folds.iter().zip(&self.per_fold) {
            let fe = fit_with_phi_y(&fold.wg, py, lambda)?;
            total += emp_error(&predict_ensemble(&fe, &fold.phi_val)?, y_val)?;
        }
        Ok(total / self.folds.k() as f64)
    }

    pub fn minimize(&self, config: &TuneConfig) -> Result<BrentResult> {
        try_brent_minimize(|l| self.value(l), 0.0, 1.0, config.xtol, config.max_iter)
    }
}

fn cv_result(br: BrentResult, k: usize, start: Instant) -> TuneResult {
    TuneResult {
        lambda_star: br.x,
        criterion_value: br.fx,
        method: TuneMethod::Cv,
        evaluations: br.evaluations,
        converged: br.converged,
        wall_time: start.elapsed().as_secs_f64(),
        factorizations: k,
        sigma_tilde_sq: None,
        trace: br.trace,
    }
}

/// k-fold CV tuning on precomputed features.
pub fn tune_cv_features(phi: &FeatureMatrix, y: &DVector<f64>, k: usize, seed: u64, config: &TuneConfig) -> Result<TuneResult> {
    let start = Instant::now();
    let sets = kfold_indices(phi.n(), k, seed)?;
    let folds = CvFolds::new(phi, &sets, config.parallel)?;
    let br = folds.objective(y)?.minimize(config)?;
    Ok(cv_result(br, folds.k(), start))
}

/// k-fold CV tuning. The basis is shared by all folds.
pub fn tune_cv(train: &Dataset, basis: &BasisEnsemble, k: usize, seed: u64, config: &TuneConfig) -> Result<TuneResult> {
    let phi = evaluate(basis, &train.features)?;
    tune_cv_features(&phi, &target_column(train, config.target)?, k, seed, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchProtocol {
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub h: usize,
    pub m: usize,
    /// Fixed kernel parameter; the median heuristic is used when absent.
    pub gamma: Option<f64>,
    pub seed: u64,
    pub tune: TuneConfig,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self { outer_folds: 5, inner_folds: 5, h: 10, m: 100, gamma: None, seed: 0, tune: TuneConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset_id: String,
    pub n: usize,
    pub d: usize,
    pub outputs: usize,
    pub test_err_cv: MeanStd,
    pub test_err_sure: MeanStd,
    pub time_cv: MeanStd,
    pub time_sure: MeanStd,
    pub lambda_cv: f64,
    pub lambda_sure: f64,
}

/// Outer k-fold evaluation of SURE and CV tuning on one dataset. Each outer
/// training part is standardized on its own statistics, gets its own basis,
/// and is tuned by both methods; the test error of the refit is averaged over
/// target columns.
pub fn benchmark_dataset(id: &str, raw: &Dataset, protocol: &BenchProtocol) -> Result<BenchRow> {
    let outer = kfold_indices(raw.n(), protocol.outer_folds, protocol.seed)?;
    let mut err_cv = Vec::new();
    let mut err_sure = Vec::new();
    let mut t_cv = Vec::new();
    let mut t_sure = Vec::new();
    let mut lam_cv = Vec::new();
    let mut lam_sure = Vec::new();

    for (f, test_idx) in outer.iter().enumerate() {
        let fold_seed = protocol.seed.wrapping_add(f as u64 + 1);
        let train_raw = raw.subset(&complement(raw.n(), test_idx));
        let test_raw = raw.subset(test_idx);
        let params = StandardizationParams::fit(&train_raw)?;
        let train = params.apply(&train_raw)?;
        let test = params.apply(&test_raw)?;
        let gamma = match protocol.gamma {
            Some(g) => g,
            None => frequency_heuristic(&train.features, fold_seed)?,
        };
        let basis = sample_rff(train.d(), protocol.h, protocol.m, gamma, fold_seed)?;
        let phi_tr = evaluate(&basis, &train.features)?;
        let phi_te = evaluate(&basis, &test.features)?;
        let outputs = train.t();

        // SURE: one factorization shared by all outputs
        let start = Instant::now();
        let g = compute_gram(&phi_tr, &train.target(0))?;
        let wg = whiten(&g)?;
        let sure_lambdas = (0..outputs)
            .map(|t| Ok(tune_sure_factored(&wg, &phi_tr, &train.target(t), &protocol.tune)?.lambda_star))
            .collect::<Result<Vec<f64>>>()?;
        t_sure.push(start.elapsed().as_secs_f64());

        let start = Instant::now();
        let sets = kfold_indices(train.n(), protocol.inner_folds, fold_seed)?;
        let folds = CvFolds::new(&phi_tr, &sets, protocol.tune.parallel)?;
        let cv_lambdas = (0..outputs)
            .map(|t| Ok(folds.objective(&train.target(t))?.minimize(&protocol.tune)?.x))
            .collect::<Result<Vec<f64>>>()?;
        t_cv.push(start.elapsed().as_secs_f64());

        let test_err = |lambdas: &[f64]| -> Result<f64> {
            let mut total = 0.0;
            for (t, &lambda) in lambdas.iter().enumerate() {
                let fe = fit_with_phi_y(&wg, &phi_y(&phi_tr, &train.target(t))?, lambda)?;
                total += emp_error(&predict_ensemble(&fe, &phi_te)?, &test.target(t))?;
            }
            Ok(total / lambdas.len() as f64)
        };
        err_sure.push(test_err(&sure_lambdas)?);
        err_cv.push(test_err(&cv_lambdas)?);
        lam_sure.extend(sure_lambdas);
        lam_cv.extend(cv_lambdas);
    }

    Ok(BenchRow {
        dataset_id: id.to_string(),
        n: raw.n(),
        d: raw.d(),
        outputs: raw.t(),
        test_err_cv: MeanStd::of(&err_cv),
        test_err_sure: MeanStd::of(&err_sure),
        time_cv: MeanStd::of(&t_cv),
        time_sure: MeanStd::of(&t_sure),
        lambda_cv: MeanStd::of(&lam_cv).mean,
        lambda_sure: MeanStd::of(&lam_sure).mean,
    })
}

/// Run [`benchmark_dataset`] on each dataset; failures are reported per
/// dataset without stopping the run.
pub fn benchmark(datasets: &[(String, Dataset)], protocol: &BenchProtocol) -> Vec<(String, Result<BenchRow>)> {
    datasets
        .iter()
        .map(|(id, ds)| (id.clone(), benchmark_dataset(id, ds, protocol)))
        .collect()
}

/// Table-shaped CSV of benchmark rows.
pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dataset",
        "n",
        "d",
        "outputs",
        "test_err_cv_mean",
        "test_err_cv_std",
        "test_err_sure_mean",
        "test_err_sure_std",
        "time_cv_mean",
        "time_cv_std",
        "time_sure_mean",
        "time_sure_std",
        "lambda_cv",
        "lambda_sure",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset_id.clone(),
            r.n.to_string(),
            r.d.to_string(),
            r.outputs.to_string(),
            format!("{:?}", r.test_err_cv.mean),
            format!("{:?}", r.test_err_cv.std),
            format!("{:?}", r.test_err_sure.mean),
            format!("{:?}", r.test_err_sure.std),
            format!("{:?}", r.time_cv.mean),
            format!("{:?}", r.time_cv.std),
            format!("{:?}", r.time_sure.mean),
            format!("{:?}", r.time_sure.std),
            format!("{:?}", r.lambda_cv),
            format!("{:?}", r.lambda_sure),
        ])?;
    }
    w.flush().map_err(|source| NclError::Io { path: "<csv>".into(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn brent_quadratic() {
        let r = brent_minimize(|x| (x - 0.3).powi(2), 0.0, 1.0, 1e-6, 100).unwrap();
        assert!((r.x - 0.3).abs() <= 1e-6, "{}", r.x);
        assert!(r.converged);
        assert_eq!(r.fx, (r.x - 0.3).powi(2));
        assert!(r.evaluations <= 100);
    }

    #[test]
    fn brent_cosine() {
        let r = brent_minimize(f64::cos, 0.0, 2.0 * PI, 1e-6, 100).unwrap();
        assert!((r.x - PI).abs() <= 1e-6, "{}", r.x);
    }

    #[test]
    fn brent_boundary_minimum() {
        let r = brent_minimize(|x| -x, 0.0, 1.0, 1e-4, 100).unwrap();
        assert_eq!(r.x, 1.0);
        let r = brent_minimize(|x| x * x, 0.5, 2.0, 1e-4, 100).unwrap();
        assert_eq!(r.x, 0.5);
    }

    #[test]
    fn brent_stays_in_bracket_and_budget() {
        let r = brent_minimize(|x| (x * 13.0).sin() + 0.1 * x, -1.0, 2.0, 1e-10, 12).unwrap();
        assert!(r.trace.iter().all(|(x, _)| (-1.0..=2.0).contains(x)));
        assert!(r.evaluations <= 12);
        assert!(brent_minimize(|x| x, 1.0, 1.0, 1e-4, 100).is_err());
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
