use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use ncl::basis::{evaluate, frequency_heuristic, sample_rff, BasisEnsemble};
use ncl::data::{
    load_csv, load_csv_columns, standardize, synthesize, write_csv, ColumnSelector, Dataset, GroundTruth,
    LoadOptions, SynthSpec,
};
use ncl::dof::{default_grid, df_curve, df_spectral, estimate_noise_variance, merge_grids, near_one_grid, uniform_grid};
use ncl::gram::{compute_gram, whiten};
use ncl::mcdof::{estimate_df, NclOracle, DEFAULT_EPSILON, DEFAULT_REPEATS};
use ncl::model::{train_model, GammaChoice, ModelFile, TrainSettings};
use ncl::theorem6::run_theorem6;
use ncl::tuning::{benchmark, tune_cv, tune_sure, write_bench_csv, BenchProtocol, TuneConfig};
use ncl::verify::{run_verify, Mutation, SUITES};

const EXIT_RUNTIME: u8 = 1;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "ncl", version, about = "Negative correlation learning ensembles over random Fourier features")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Write the result here instead of standard output.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an ensemble at a fixed lambda and save the model.
    Fit(FitArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Select lambda by SURE or k-fold cross validation.
    Tune(TuneArgs),
    /// Degrees of freedom, training error and SURE along a lambda grid.
    DfCurve(CurveArgs),
    /// Run the property suites.
    Verify(VerifyArgs),
    /// Compare SURE and CV tuning on one or more datasets.
    Bench(BenchArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Monte-Carlo degrees of freedom next to the closed form.
    McDf(McDfArgs),
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("lambda must lie in [0, 1], got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Target column names, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "target_indices", required_unless_present = "target_indices")]
    targets: Vec<String>,
    /// Target column indices (0-based), comma separated.
    #[arg(long, value_delimiter = ',')]
    target_indices: Vec<usize>,
    /// Skip rows with missing or non-finite cells instead of failing.
    #[arg(long)]
    drop_missing: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let sel = if self.target_indices.is_empty() {
            ColumnSelector::Names(self.targets.clone())
        } else {
            ColumnSelector::Indices(self.target_indices.clone())
        };
        load_csv(&self.data, &sel, LoadOptions { drop_nonfinite_rows: self.drop_missing })
            .with_context(|| format!("loading {}", self.data.display()))
    }
}

#[derive(Args, Clone)]
struct BasisArgs {
    /// Basis functions per member.
    #[arg(long = "H", default_value_t = 10)]
    h: usize,
    /// Ensemble members.
    #[arg(long = "M", default_value_t = 100)]
    m: usize,
    /// Fixed kernel parameter of the random Fourier features.
    #[arg(long, value_parser = parse_positive, conflicts_with = "auto_gamma")]
    gamma: Option<f64>,
    /// Median-distance heuristic for gamma (the default).
    #[arg(long)]
    auto_gamma: bool,
    #[arg(long, env = "NCL_SEED", default_value_t = 0)]
    seed: u64,
}

impl BasisArgs {
    fn gamma_choice(&self) -> GammaChoice {
        self.gamma.map_or(GammaChoice::Auto, GammaChoice::Fixed)
    }

    fn check(&self) -> Result<()> {
        if self.h == 0 || self.m == 0 {
            bail!("--H and --M must be positive");
        }
        Ok(())
    }

    /// Basis for standardized training features.
    fn sample(&self, train: &Dataset) -> Result<BasisEnsemble> {
        self.check()?;
        let gamma = match self.gamma_choice() {
            GammaChoice::Fixed(g) => g,
            GammaChoice::Auto => frequency_heuristic(&train.features, self.seed)?,
        };
        Ok(sample_rff(train.d(), self.h, self.m, gamma, self.seed)?)
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, value_parser = parse_lambda)]
    lambda: f64,
    /// Where to save the model JSON.
    #[arg(long)]
    model_out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV holding the model's feature columns; target columns, when
    /// present, are used to report the error.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    drop_missing: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Sure,
    Cv5,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, value_enum, default_value_t = Method::Sure)]
    method: Method,
    /// Which selected target column to tune for (0-based).
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Known noise variance on the standardized scale.
    #[arg(long)]
    sigma_sq: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    xtol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Include wall time in the output (makes it non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CurveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// `default`, `near-one`, `uniform:<n>` or a comma separated list.
    #[arg(long, default_value = "default")]
    grid: String,
    /// Known noise variance; estimated from the lambda = 0 fit otherwise.
    #[arg(long)]
    sigma_sq: Option<f64>,
    /// Also write the eigenvalues of the whitened Gram matrix here.
    #[arg(long)]
    spectrum_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these suites.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    only: Vec<String>,
    /// Run the suites against a deliberately wrong df formula.
    #[arg(long, hide = true)]
    inject_df_bug: bool,
    /// Run the fixed-design noise experiment instead and print its report.
    #[arg(long)]
    theorem6: bool,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 200)]
    draws: usize,
    #[arg(long, env = "NCL_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset CSVs.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Target column names shared by all datasets.
    #[arg(long, value_delimiter = ',', conflicts_with = "target_indices", required_unless_present = "target_indices")]
    targets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    target_indices: Vec<usize>,
    #[arg(long)]
    drop_missing: bool,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, default_value_t = 5)]
    outer_folds: usize,
    #[arg(long, default_value_t = 5)]
    inner_folds: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, env = "NCL_SEED", default_value_t = 0)]
    seed: u64,
    /// Add the noiseless regression function as a `mu` column.
    #[arg(long)]
    with_mu: bool,
}

#[derive(Args)]
struct McDfArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    basis: BasisArgs,
    #[arg(long, value_parser = parse_lambda)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long, value_parser = parse_positive, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
}

struct Out {
    path: Option<PathBuf>,
    format: Format,
}

impl Out {
    fn write(&self, text: &str) -> Result<()> {
        match &self.path {
            Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
            None => {
                let mut so = std::io::stdout().lock();
                so.write_all(text.as_bytes())?;
                so.flush()?;
                Ok(())
            }
        }
    }

    fn json<T: Serialize>(&self, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(&text)
    }
}

fn csv_text(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn target_column(ds: &Dataset, t: usize) -> Result<usize> {
    if t >= ds.t() {
        bail!("--target {t} out of range: {} target columns selected", ds.t());
    }
    Ok(t)
}

#[derive(Serialize)]
struct FitReport<'a> {
    model: String,
    lambda: f64,
    h: usize,
    m: usize,
    q: usize,
    gamma: f64,
    targets: &'a [String],
    train_emp_err: &'a [f64],
}

fn cmd_fit(a: FitArgs, out: &Out) -> Result<()> {
    a.basis.check()?;
    let raw = a.data.load()?;
    let settings =
        TrainSettings { h: a.basis.h, m: a.basis.m, lambda: a.lambda, gamma: a.basis.gamma_choice(), seed: a.basis.seed };
    let model = train_model(&raw, &settings)?;
    model.save(&a.model_out)?;
    match out.format {
        Format::Json => out.json(&FitReport {
            model: a.model_out.display().to_string(),
            lambda: model.lambda,
            h: model.h,
            m: model.m,
            q: model.q,
            gamma: model.basis.gamma(),
            targets: &model.target_names,
            train_emp_err: &model.train_emp_err,
        }),
        Format::Csv => {
            let mut text = String::from("target,train_emp_err\n");
            for (n, e) in model.target_names.iter().zip(&model.train_emp_err) {
                text.push_str(&format!("{n},{e:?}\n"));
            }
            out.write(&text)
        }
    }
}

#[derive(Serialize)]
struct PredictReport {
    targets: Vec<String>,
    predictions: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    emp_err: Option<Vec<f64>>,
}

fn has_columns(path: &Path, names: &[String]) -> Result<bool> {
    let mut rdr = csv::ReaderBuilder::new().from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    Ok(names.iter().all(|n| headers.iter().any(|h| h.trim() == n)))
}

fn cmd_predict(a: PredictArgs, out: &Out) -> Result<()> {
    let model = ModelFile::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let opts = LoadOptions { drop_nonfinite_rows: a.drop_missing };
    let targets: &[String] = if has_columns(&a.data, &model.target_names)? { &model.target_names } else { &[] };
    let (x, y) = load_csv_columns(&a.data, &model.feature_names, targets, opts)?;
    let preds = model.predict(&x)?;
    let emp_err = y.map(|y| model.emp_error(&x, &y)).transpose()?;
    let rows: Vec<Vec<f64>> = preds.row_iter().map(|r| r.iter().copied().collect()).collect();
    match out.format {
        Format::Json => out.json(&PredictReport { targets: model.target_names.clone(), predictions: rows, emp_err }),
        Format::Csv => out.write(&csv_text(&model.target_names, &rows)),
    }
}

#[derive(Serialize)]
struct TuneReport {
    method: &'static str,
    lambda_star: f64,
    criterion_value: f64,
    evaluations: usize,
    converged: bool,
    factorizations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_tilde_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time: Option<f64>,
    gamma: f64,
    target: String,
    trace: Vec<(f64, f64)>,
}

fn cmd_tune(a: TuneArgs, out: &Out) -> Result<()> {
    let raw = a.data.load()?;
    let target = target_column(&raw, a.target)?;
    let (train, _) = standardize(&raw)?;
    let basis = a.basis.sample(&train)?;
    let config = TuneConfig { xtol: a.xtol, max_iter: a.max_iter, target, sigma_sq: a.sigma_sq, parallel: true };
    let (method, r) = match a.method {
        Method::Sure => ("sure", tune_sure(&train, &basis, &config)?),
        Method::Cv5 => ("cv5", tune_cv(&train, &basis, 5, a.basis.seed, &config)?),
    };
    let report = TuneReport {
        method,
        lambda_star: r.lambda_star,
        criterion_value: r.criterion_value,
        evaluations: r.evaluations,
        converged: r.converged,
        factorizations: r.factorizations,
        sigma_tilde_sq: r.sigma_tilde_sq,
        wall_time: a.timing.then_some(r.wall_time),
        gamma: basis.gamma(),
        target: train.target_names[target].clone(),
        trace: r.trace,
    };
    match out.format {
        Format::Json => out.json(&report),
        Format::Csv => {
            let rows: Vec<Vec<f64>> = report.trace.iter().map(|&(l, c)| vec![l, c]).collect();
            out.write(&csv_text(&["lambda".into(), "criterion".into()], &rows))
        }
    }
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let grid = match spec {
        "default" => default_grid(),
        "near-one" => merge_grids(&[0.0, 1.0], &near_one_grid()),
        s if s.starts_with("uniform:") => {
            let n: usize = s["uniform:".len()..].parse().context("uniform:<n> needs an integer")?;
            if n < 2 {
                bail!("uniform grid needs at least 2 points");
            }
            uniform_grid(n)
        }
        s => s
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid value {v:?}")))
            .collect::<Result<_>>()?,
    };
    Ok(grid)
}

fn cmd_df_curve(a: CurveArgs, out: &Out) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let raw = a.data.load()?;
    let target = target_column(&raw, a.target)?;
    let (train, _) = standardize(&raw)?;
    let basis = a.basis.sample(&train)?;
    let phi = evaluate(&basis, &train.features)?;
    let y = train.target(target);
    let g = compute_gram(&phi, &y)?;
    let wg = whiten(&g)?;
    let s2 = match a.sigma_sq {
        Some(s) => s,
        None => estimate_noise_variance(&wg, &g, &phi, &y)?,
    };
    let curve = df_curve(&wg, &g, &phi, &y, &grid, Some(s2))?;
    if let Some(p) = &a.spectrum_out {
        wg.write_spectrum_csv(p)?;
    }
    match out.format {
        Format::Json => out.json(&curve),
        Format::Csv => {
            let mut buf = Vec::new();
            curve.write_csv(&mut buf)?;
            out.write(&String::from_utf8(buf)?)
        }
    }
}

fn cmd_verify(a: VerifyArgs, out: &Out) -> Result<bool> {
    if a.theorem6 {
        let spec = SynthSpec { n: 500, d: 3, mu: GroundTruth::SumOfSines, sigma: a.sigma, seed: a.seed };
        let basis = sample_rff(3, 15, 10, 4.0, a.seed.wrapping_add(1))?;
        let report = run_theorem6(&spec, &basis, &default_grid(), a.draws, a.seed)?;
        let ok = if a.sigma > 0.0 { report.lambda_best < 1.0 } else { report.lambda_best == 1.0 };
        out.json(&report)?;
        return Ok(ok);
    }
    let mutation = if a.inject_df_bug { Mutation::DfFormula } else { Mutation::None };
    let report = run_verify(&a.only, mutation);
    match out.format {
        Format::Json => out.json(&report)?,
        Format::Csv => {
            let mut text = String::from("suite,passed,checks,seconds\n");
            for s in &report.suites {
                text.push_str(&format!("{},{},{},{:.3}\n", s.name, s.passed, s.checks, s.seconds));
            }
            out.write(&text)?;
        }
    }
    eprint!("{}", report.table());
    Ok(report.passed)
}

fn cmd_bench(a: BenchArgs, out: &Out) -> Result<()> {
    let sel = if a.target_indices.is_empty() {
        ColumnSelector::Names(a.targets.clone())
    } else {
        ColumnSelector::Indices(a.target_indices.clone())
    };
    let opts = LoadOptions { drop_nonfinite_rows: a.drop_missing };
    let mut datasets = Vec::new();
    let mut failed = Vec::new();
    for p in &a.data {
        let id = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        match load_csv(p, &sel, opts) {
            Ok(ds) => datasets.push((id, ds)),
            Err(e) => failed.push((id, e.to_string())),
        }
    }
    a.basis.check()?;
    let protocol = BenchProtocol {
        outer_folds: a.outer_folds,
        inner_folds: a.inner_folds,
        h: a.basis.h,
        m: a.basis.m,
        gamma: a.basis.gamma,
        seed: a.basis.seed,
        tune: TuneConfig { parallel: true, ..TuneConfig::default() },
    };
    let mut rows = Vec::new();
    for (id, r) in benchmark(&datasets, &protocol) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => failed.push((id, e.to_string())),
        }
    }
    for (id, e) in &failed {
        eprintln!("{id}: {e}");
    }
    match out.format {
        Format::Json => out.json(&rows)?,
        Format::Csv => {
            let mut buf = Vec::new();
            write_bench_csv(&rows, &mut buf)?;
            out.write(&String::from_utf8(buf)?)?;
        }
    }
    if rows.is_empty() {
        bail!("no dataset could be benchmarked");
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, out: &Out) -> Result<()> {
    let s = synthesize(&SynthSpec { n: a.n, d: a.d, mu: GroundTruth::SumOfSines, sigma: a.sigma, seed: a.seed })?;
    let mut ds = s.dataset;
    if a.with_mu {
        let targets = DMatrix::from_fn(ds.n(), 2, |i, j| if j == 0 { ds.targets[(i, 0)] } else { s.mu_values[i] });
        ds = Dataset::new(ds.features, targets, ds.feature_names, vec![ds.target_names[0].clone(), "mu".into()])?;
    }
    match out.format {
        Format::Csv => match &out.path {
            Some(p) => Ok(write_csv(p, &ds)?),
            None => {
                let header: Vec<String> = ds.feature_names.iter().chain(&ds.target_names).cloned().collect();
                let rows: Vec<Vec<f64>> = (0..ds.n())
                    .map(|i| ds.features.row(i).iter().chain(ds.targets.row(i).iter()).copied().collect())
                    .collect();
                out.write(&csv_text(&header, &rows))
            }
        },
        Format::Json => out.json(&ds),
    }
}

#[derive(Serialize)]
struct McDfReport {
    lambda: f64,
    analytic_df: f64,
    estimate: ncl::mcdof::McDfEstimate,
}

fn cmd_mc_df(a: McDfArgs, out: &Out) -> Result<()> {
    let raw = a.data.load()?;
    let target = target_column(&raw, a.target)?;
    let (train, _) = standardize(&raw)?;
    let basis = a.basis.sample(&train)?;
    let phi = evaluate(&basis, &train.features)?;
    let y = train.target(target);
    let wg = whiten(&compute_gram(&phi, &y)?)?;
    let oracle = NclOracle { wg: &wg, phi: &phi, lambda: a.lambda };
    let estimate = estimate_df(&oracle, &y, a.epsilon, a.repeats, a.basis.seed)?;
    let analytic_df = df_spectral(wg.eigenvalues.as_slice(), a.lambda, wg.m)?;
    match out.format {
        Format::Json => out.json(&McDfReport { lambda: a.lambda, analytic_df, estimate }),
        Format::Csv => out.write(&csv_text(
            &["lambda".into(), "analytic_df".into(), "mc_df".into(), "std_error".into()],
            &[vec![a.lambda, analytic_df, estimate.value, estimate.std_error]],
        )),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    let out = Out { path: cli.output, format: cli.format };
    match cli.command {
        Command::Fit(a) => cmd_fit(a, &out)?,
        Command::Predict(a) => cmd_predict(a, &out)?,
        Command::Tune(a) => cmd_tune(a, &out)?,
        Command::DfCurve(a) => cmd_df_curve(a, &out)?,
        Command::Verify(a) => {
            if !cmd_verify(a, &out)? {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
        Command::Bench(a) => cmd_bench(a, &out)?,
        Command::Synth(a) => cmd_synth(a, &out)?,
        Command::McDf(a) => cmd_mc_df(a, &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
