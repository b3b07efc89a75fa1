//! Random Fourier Feature bases, one cosine block of width H per member.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NclError, Result};

/// Maximum number of points used by [`frequency_heuristic`].
pub const HEURISTIC_SUBSAMPLE: usize = 1000;

/// Median-distance bandwidth rule for the Gaussian kernel
/// `exp(-gamma * |x - y|^2)`: `gamma = 1 / (2 m^2)` with `m` the median
/// pairwise distance over at most [`HEURISTIC_SUBSAMPLE`] rows of `x`.
pub fn frequency_heuristic(x: &DMatrix<f64>, seed: u64) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(NclError::InvalidArgument("frequency heuristic needs N >= 2".into()));
    }
    let rows: Vec<usize> = if n > HEURISTIC_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample(&mut rng, n, HEURISTIC_SUBSAMPLE).into_vec();
        s.sort_unstable();
        s
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (a, &i) in rows.iter().enumerate() {
        for &j in &rows[a + 1..] {
            dists.push((x.row(i) - x.row(j)).norm());
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let median = if k % 2 == 1 { dists[k / 2] } else { 0.5 * (dists[k / 2 - 1] + dists[k / 2]) };
    if !(median > 0.0) {
        return Err(NclError::DegeneratePoints);
    }
    Ok(1.0 / (2.0 * median * median))
}

/// M fixed cosine bases `phi_m(x) = cos(zeta_m x + b_m)`, each of width H.
///
/// Frequencies of all members are stacked into one Q×d matrix (member m owns
/// rows `m*H .. (m+1)*H`) and phases into a Q vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEnsemble {
    d: usize,
    h: usize,
    m: usize,
    gamma: f64,
    seed: Option<u64>,
    frequencies: DMatrix<f64>,
    phases: Vec<f64>,
}

impl BasisEnsemble {
    /// Build from explicit frequencies (Q×d) and phases (Q).
    pub fn from_parts(h: usize, m: usize, gamma: f64, frequencies: DMatrix<f64>, phases: Vec<f64>) -> Result<Self> {
        if h == 0 || m == 0 || frequencies.ncols() == 0 {
            return Err(NclError::InvalidArgument("H, M and d must be positive".into()));
        }
        if frequencies.nrows() != h * m || phases.len() != h * m {
            return Err(NclError::Dimension(format!(
                "expected {} frequency rows and phases, got {} and {}",
                h * m,
                frequencies.nrows(),
                phases.len()
            )));
        }
        Ok(Self { d: frequencies.ncols(), h, m, gamma, seed: None, frequencies, phases })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn q(&self) -> usize {
        self.h * self.m
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }
    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    /// Frequencies of member `m` (H×d).
    pub fn member_frequencies(&self, m: usize) -> DMatrix<f64> {
        self.frequencies.rows(m * self.h, self.h).into_owned()
    }

    /// Stable fingerprint of the sampled parameters, used to tie fitted
    /// models to the basis they were fitted with.
    pub fn fingerprint(&self) -> String {
        // FNV-1a over the bit patterns
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            for byte in v.to_le_bytes() {
                hash ^= u64::from(byte);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(self.d as u64);
        eat(self.h as u64);
        eat(self.m as u64);
        eat(self.gamma.to_bits());
        self.frequencies.iter().for_each(|v| eat(v.to_bits()));
        self.phases.iter().for_each(|v| eat(v.to_bits()));
        format!("rff-{hash:016x}")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|source| NclError::Io { path: path.to_path_buf(), source })
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| NclError::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// On-disk layout: per-member nested arrays.
#[derive(Serialize, Deserialize)]
struct BasisFile {
    gamma: f64,
    seed: Option<u64>,
    d: usize,
    h: usize,
    m: usize,
    /// `zeta[m][i]` is row i of member m's frequency matrix.
    zeta: Vec<Vec<Vec<f64>>>,
    /// `b[m][i]` is the phase of feature i of member m.
    b: Vec<Vec<f64>>,
}

impl Serialize for BasisEnsemble {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let zeta = (0..self.m)
            .map(|m| {
                (0..self.h)
                    .map(|i| self.frequencies.row(m * self.h + i).iter().copied().collect())
                    .collect()
            })
            .collect();
        let b = self.phases.chunks(self.h).map(<[f64]>::to_vec).collect();
        BasisFile { gamma: self.gamma, seed: self.seed, d: self.d, h: self.h, m: self.m, zeta, b }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BasisEnsemble {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error;
        let f = BasisFile::deserialize(de)?;
        let rows: Vec<&Vec<f64>> = f.zeta.iter().flatten().collect();
        if rows.len() != f.h * f.m || rows.iter().any(|r| r.len() != f.d) {
            return Err(D::Error::custom("zeta shape does not match d, h, m"));
        }
        let frequencies = DMatrix::from_fn(rows.len(), f.d, |i, j| rows[i][j]);
        let phases: Vec<f64> = f.b.into_iter().flatten().collect();
        let mut basis =
            BasisEnsemble::from_parts(f.h, f.m, f.gamma, frequencies, phases).map_err(D::Error::custom)?;
        basis.seed = f.seed;
        Ok(basis)
    }
}

/// Sample a basis for the Gaussian kernel `exp(-gamma |x - y|^2)`:
/// frequencies i.i.d. `N(0, 2 gamma)`, phases uniform on `[0, 2 pi)`.
pub fn sample_rff(d: usize, h: usize, m: usize, gamma: f64, seed: u64) -> Result<BasisEnsemble> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(NclError::InvalidArgument(format!("gamma = {gamma} must be positive")));
    }
    if d == 0 || h == 0 || m == 0 {
        return Err(NclError::InvalidArgument("d, H and M must be at least 1".into()));
    }
    let q = h * m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 * gamma).sqrt()).expect("positive std");
    let mut frequencies = DMatrix::zeros(q, d);
    for i in 0..q {
        for j in 0..d {
            frequencies[(i, j)] = normal.sample(&mut rng);
        }
    }
    let phases = (0..q).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    Ok(BasisEnsemble { d, h, m, gamma, seed: Some(seed), frequencies, phases })
}

/// Stacked feature values, Q×N: column n is `phi(x_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub phi: DMatrix<f64>,
    pub h: usize,
    pub m: usize,
}

impl FeatureMatrix {
    pub fn new(phi: DMatrix<f64>, h: usize, m: usize) -> Result<Self> {
        if phi.nrows() != h * m {
            return Err(NclError::Dimension(format!("{} feature rows, expected H*M = {}", phi.nrows(), h * m)));
        }
        Ok(Self { phi, h, m })
    }

    pub fn q(&self) -> usize {
        self.h * self.m
    }

    pub fn n(&self) -> usize {
        self.phi.ncols()
    }

    /// Columns at `indices`.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix { phi: self.phi.select_columns(indices), h: self.h, m: self.m }
    }
}

/// Evaluate every basis function at the rows of `x` (N×d).
pub fn evaluate(basis: &BasisEnsemble, x: &DMatrix<f64>) -> Result<FeatureMatrix> {
    if x.ncols() != basis.d {
        return Err(NclError::Dimension(format!("basis expects d = {}, data has {} columns", basis.d, x.ncols())));
    }
    let mut phi = &basis.frequencies * x.transpose();
    for (i, mut row) in phi.row_iter_mut().enumerate() {
        let b = basis.phases[i];
        row.apply(|v| *v = (*v + b).cos());
    }
    FeatureMatrix::new(phi, basis.h, basis.m)
}
