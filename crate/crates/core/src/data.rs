//! CSV ingestion, standardization, splitting and synthetic data.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NclError, Result};

/// Features (N×d) and targets (N×T) with their column names.
///
/// The same type holds both raw and standardized data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

pub type RawDataset = Dataset;

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        targets: DMatrix<f64>,
        feature_names: Vec<String>,
        target_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != targets.nrows() {
            return Err(NclError::Dimension(format!(
                "{} feature rows vs {} target rows",
                features.nrows(),
                targets.nrows()
            )));
        }
        if features.nrows() < 2 || features.ncols() < 1 || targets.ncols() < 1 {
            return Err(NclError::InvalidArgument(format!(
                "dataset needs N >= 2, d >= 1, T >= 1 (got N = {}, d = {}, T = {})",
                features.nrows(),
                features.ncols(),
                targets.ncols()
            )));
        }
        if feature_names.len() != features.ncols() || target_names.len() != targets.ncols() {
            return Err(NclError::Dimension("column names do not match matrix widths".into()));
        }
        Ok(Self { features, targets, feature_names, target_names })
    }

    /// Single-output convenience constructor with generated names.
    pub fn from_xy(features: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let d = features.ncols();
        let names = (0..d).map(|j| format!("x{j}")).collect();
        let n = y.len();
        Self::new(features, DMatrix::from_column_slice(n, 1, y.as_slice()), names, vec!["y".into()])
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn t(&self) -> usize {
        self.targets.ncols()
    }

    pub fn target(&self, col: usize) -> DVector<f64> {
        self.targets.column(col).into_owned()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            targets: self.targets.select_rows(indices),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }
}

/// Which CSV columns are targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSelector {
    Names(Vec<String>),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Drop rows holding non-finite or empty numeric cells instead of failing.
    pub drop_nonfinite_rows: bool,
}

enum Cell {
    Value(f64),
    Missing,
    Text,
}

fn parse_cell(raw: &str) -> Cell {
    let s = raw.trim();
    if s.is_empty() {
        return Cell::Missing;
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Cell::Value(v),
        Ok(_) => Cell::Missing,
        Err(_) => Cell::Text,
    }
}

/// Header plus raw string cells of a CSV file.
struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path)
        .map_err(|source| NclError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(Table { headers, rows })
}

fn resolve(selector: &ColumnSelector, headers: &[String]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match selector {
        ColumnSelector::Names(names) => names
            .iter()
            .map(|n| {
                headers
                    .iter()
                    .position(|h| h == n)
                    .ok_or_else(|| NclError::UnknownColumn(n.clone()))
            })
            .collect::<Result<_>>()?,
        ColumnSelector::Indices(ix) => {
            for &i in ix {
                if i >= headers.len() {
                    return Err(NclError::ColumnIndex { index: i, ncols: headers.len() });
                }
            }
            ix.clone()
        }
    };
    if idx.is_empty() {
        return Err(NclError::EmptySelection);
    }
    let mut seen = HashSet::new();
    for &i in &idx {
        if !seen.insert(i) {
            return Err(NclError::DuplicateSelection(headers[i].clone()));
        }
    }
    Ok(idx)
}

/// Load a CSV: targets are the selected columns, features are every other
/// numeric column in file order. Text columns outside the selection are skipped.
pub fn load_csv(path: impl AsRef<Path>, targets: &ColumnSelector, opts: LoadOptions) -> Result<Dataset> {
    let table = read_table(path.as_ref())?;
    let target_idx = resolve(targets, &table.headers)?;
    let numeric = |col: usize| {
        table
            .rows
            .iter()
            .all(|r| !matches!(parse_cell(r.get(col).map(String::as_str).unwrap_or("")), Cell::Text))
    };
    let feature_idx: Vec<usize> = (0..table.headers.len())
        .filter(|c| !target_idx.contains(c) && numeric(*c))
        .collect();
    assemble(&table, &feature_idx, &target_idx, opts)
}

/// Load a CSV with explicitly named feature and target columns. Used when
/// re-reading data for a saved model; `targets` may be empty.
pub fn load_csv_columns(
    path: impl AsRef<Path>,
    features: &[String],
    targets: &[String],
    opts: LoadOptions,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let table = read_table(path.as_ref())?;
    let feature_idx = resolve(&ColumnSelector::Names(features.to_vec()), &table.headers)?;
    let target_idx = if targets.is_empty() {
        None
    } else {
        Some(resolve(&ColumnSelector::Names(targets.to_vec()), &table.headers)?)
    };
    let all: Vec<usize> =
        feature_idx.iter().chain(target_idx.iter().flatten()).copied().collect();
    let rows = numeric_rows(&table, &all, opts)?;
    let d = feature_idx.len();
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let y = target_idx.map(|t| DMatrix::from_fn(rows.len(), t.len(), |i, j| rows[i][d + j]));
    Ok((x, y))
}

fn numeric_rows(table: &Table, cols: &[usize], opts: LoadOptions) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(table.rows.len());
    'rows: for (r, row) in table.rows.iter().enumerate() {
        let mut vals = Vec::with_capacity(cols.len());
        for &c in cols {
            let raw = row.get(c).map(String::as_str).unwrap_or("");
            match parse_cell(raw) {
                Cell::Value(v) => vals.push(v),
                Cell::Text => {
                    return Err(NclError::NonNumeric {
                        column: table.headers[c].clone(),
                        row: r + 1,
                        value: raw.to_string(),
                    })
                }
                Cell::Missing if opts.drop_nonfinite_rows => continue 'rows,
                Cell::Missing => {
                    return Err(NclError::NonFinite { column: table.headers[c].clone(), row: r + 1 })
                }
            }
        }
        out.push(vals);
    }
    Ok(out)
}

fn assemble(table: &Table, feature_idx: &[usize], target_idx: &[usize], opts: LoadOptions) -> Result<Dataset> {
    let all: Vec<usize> = feature_idx.iter().chain(target_idx).copied().collect();
    let rows = numeric_rows(table, &all, opts)?;
    let d = feature_idx.len();
    let t = target_idx.len();
    let n = rows.len();
    Dataset::new(
        DMatrix::from_fn(n, d, |i, j| rows[i][j]),
        DMatrix::from_fn(n, t, |i, j| rows[i][d + j]),
        feature_idx.iter().map(|&i| table.headers[i].clone()).collect(),
        target_idx.iter().map(|&i| table.headers[i].clone()).collect(),
    )
}

/// Write a dataset as CSV with features first, then targets.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ds.feature_names.iter().chain(&ds.target_names))?;
    for i in 0..ds.n() {
        let rec: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .chain(ds.targets.row(i).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| NclError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Per-column affine maps that bring every feature and target to mean 0 and
/// population standard deviation 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_means: Vec<f64>,
    pub target_stds: Vec<f64>,
}

fn column_moments(mat: &DMatrix<f64>, names: &[String]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = mat.nrows() as f64;
    let mut means = Vec::with_capacity(mat.ncols());
    let mut stds = Vec::with_capacity(mat.ncols());
    for (j, col) in mat.column_iter().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        // Relative guard: a column whose spread is at roundoff level is constant.
        let scale = col.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !(std > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return Err(NclError::ConstantColumn(names[j].clone()));
        }
        means.push(mean);
        stds.push(std);
    }
    Ok((means, stds))
}

fn affine(mat: &DMatrix<f64>, means: &[f64], stds: &[f64], forward: bool) -> DMatrix<f64> {
    DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| {
        if forward {
            (mat[(i, j)] - means[j]) / stds[j]
        } else {
            mat[(i, j)] * stds[j] + means[j]
        }
    })
}

impl StandardizationParams {
    pub fn fit(raw: &Dataset) -> Result<Self> {
        let (feature_means, feature_stds) = column_moments(&raw.features, &raw.feature_names)?;
        let (target_means, target_stds) = column_moments(&raw.targets, &raw.target_names)?;
        Ok(Self { feature_means, feature_stds, target_means, target_stds })
    }

    fn check(&self, ds: &Dataset) -> Result<()> {
        if ds.d() != self.feature_means.len() || ds.t() != self.target_means.len() {
            return Err(NclError::Dimension(format!(
                "params for d = {}, T = {}; dataset has d = {}, T = {}",
                self.feature_means.len(),
                self.target_means.len(),
                ds.d(),
                ds.t()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, raw: &Dataset) -> Result<Dataset> {
        self.check(raw)?;
        Ok(Dataset {
            features: self.transform_features(&raw.features)?,
            targets: affine(&raw.targets, &self.target_means, &self.target_stds, true),
            feature_names: raw.feature_names.clone(),
            target_names: raw.target_names.clone(),
        })
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        self.check(ds)?;
        Ok(Dataset {
            features: affine(&ds.features, &self.feature_means, &self.feature_stds, false),
            targets: affine(&ds.targets, &self.target_means, &self.target_stds, false),
            feature_names: ds.feature_names.clone(),
            target_names: ds.target_names.clone(),
        })
    }

    pub fn transform_features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.feature_means.len() {
            return Err(NclError::Dimension(format!(
                "expected {} feature columns, got {}",
                self.feature_means.len(),
                x.ncols()
            )));
        }
        Ok(affine(x, &self.feature_means, &self.feature_stds, true))
    }

    pub fn transform_targets(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        affine(y, &self.target_means, &self.target_stds, true)
    }

    pub fn invert_targets(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        affine(y, &self.target_means, &self.target_stds, false)
    }
}

/// Standardize every column to mean 0 and population std 1.
pub fn standardize(raw: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    let params = StandardizationParams::fit(raw)?;
    let ds = params.apply(raw)?;
    Ok((ds, params))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffled train/test split; the test part gets `round(fraction * N)` rows
/// (at least one).
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(NclError::InvalidArgument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n = ds.n();
    let n_test = ((test_fraction * n as f64).round() as usize).max(1);
    if n < n_test + 2 {
        return Err(NclError::InvalidArgument(format!(
            "split leaves {} training rows, need at least 2",
            n.saturating_sub(n_test)
        )));
    }
    let idx = shuffled(n, seed);
    let (test, train) = idx.split_at(n_test);
    Ok((ds.subset(train), ds.subset(test)))
}

/// Validation index sets for k-fold CV. Sizes differ by at most one and
/// together partition `0..n`.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(NclError::InvalidArgument(format!("k = {k} outside [2, {n}]")));
    }
    let idx = shuffled(n, seed);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Training indices complementary to `validation`.
pub fn complement(n: usize, validation: &[usize]) -> Vec<usize> {
    let held: HashSet<usize> = validation.iter().copied().collect();
    (0..n).filter(|i| !held.contains(i)).collect()
}

/// `k` (train, validation) pairs.
pub fn kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    let folds = kfold_indices(ds.n(), k, seed)?;
    Ok(folds
        .iter()
        .map(|val| (ds.subset(&complement(ds.n(), val)), ds.subset(val)))
        .collect())
}

/// Ground-truth regression functions for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    /// `sum_j sin(3 x_j) + 0.5 cos(7 x_1)`
    #[default]
    SumOfSines,
}

impl GroundTruth {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            GroundTruth::SumOfSines => {
                x.iter().map(|v| (3.0 * v).sin()).sum::<f64>() + 0.5 * (7.0 * x[0]).cos()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub mu: GroundTruth,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub mu_values: DVector<f64>,
    pub sigma: f64,
}

/// Uniform design on `[-1, 1]^d`, targets `mu(x) + N(0, sigma^2)`.
pub fn synthesize(spec: &SynthSpec) -> Result<SynthDataset> {
    if !(spec.sigma >= 0.0) || !spec.sigma.is_finite() {
        return Err(NclError::InvalidArgument(format!("sigma = {} must be >= 0", spec.sigma)));
    }
    if spec.n < 2 || spec.d < 1 {
        return Err(NclError::InvalidArgument("synthetic data needs n >= 2 and d >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = DMatrix::zeros(spec.n, spec.d);
    // row-major draw order
    for i in 0..spec.n {
        for j in 0..spec.d {
            x[(i, j)] = rng.random_range(-1.0..=1.0);
        }
    }
    let mu_values =
        DVector::from_iterator(spec.n, x.row_iter().map(|r| spec.mu.eval(&r.iter().copied().collect::<Vec<_>>())));
    let noise = noise_draw(spec.n, spec.sigma, &mut rng);
    let y = &mu_values + noise;
    Ok(SynthDataset { dataset: Dataset::from_xy(x, y)?, mu_values, sigma: spec.sigma })
}

/// `n` i.i.d. `N(0, sigma^2)` draws.
pub fn noise_draw<R: Rng>(n: usize, sigma: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        sigma * z
    })
}
