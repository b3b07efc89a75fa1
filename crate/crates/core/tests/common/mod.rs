//! Instance generators and independent reference computations shared by the
//! integration tests. Nothing here goes through the whitened solver.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ncl::basis::{evaluate, sample_rff, BasisEnsemble, FeatureMatrix};
use ncl::data::{synthesize, GroundTruth, SynthSpec};
use ncl::gram::{compute_gram, whiten, GramBundle, WhitenedGram};

pub struct Instance {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub mu: DVector<f64>,
    pub basis: BasisEnsemble,
    pub phi: FeatureMatrix,
    pub g: GramBundle,
    pub wg: WhitenedGram,
}

impl Instance {
    pub fn h(&self) -> usize {
        self.phi.h
    }
    pub fn m(&self) -> usize {
        self.phi.m
    }
    pub fn n(&self) -> usize {
        self.phi.n()
    }
}

pub fn build(x: DMatrix<f64>, y: DVector<f64>, mu: DVector<f64>, basis: BasisEnsemble) -> Instance {
    let phi = evaluate(&basis, &x).unwrap();
    let g = compute_gram(&phi, &y).unwrap();
    let wg = whiten(&g).unwrap();
    Instance { x, y, mu, basis, phi, g, wg }
}

/// Synthetic sum-of-sines data on `[-1, 1]^d` with an RFF basis.
pub fn random_instance(n: usize, d: usize, h: usize, m: usize, sigma: f64, seed: u64) -> Instance {
    let s = synthesize(&SynthSpec { n, d, mu: GroundTruth::SumOfSines, sigma, seed }).unwrap();
    let basis = sample_rff(d, h, m, 1.0, seed.wrapping_mul(31).wrapping_add(7)).unwrap();
    build(s.dataset.features.clone(), s.dataset.target(0), s.mu_values, basis)
}

/// Like [`random_instance`] but members `1..m` copy member 0, so the full
/// Gram matrix has rank H.
pub fn duplicated_instance(n: usize, d: usize, h: usize, m: usize, seed: u64) -> Instance {
    let s = synthesize(&SynthSpec { n, d, mu: GroundTruth::SumOfSines, sigma: 0.3, seed }).unwrap();
    let one = sample_rff(d, h, 1, 1.0, seed + 1).unwrap();
    let freqs = DMatrix::from_fn(h * m, d, |i, j| one.frequencies()[(i % h, j)]);
    let phases = (0..h * m).map(|i| one.phases()[i % h]).collect();
    let basis = BasisEnsemble::from_parts(h, m, 1.0, freqs, phases).unwrap();
    build(s.dataset.features.clone(), s.dataset.target(0), s.mu_values, basis)
}

/// Half the members duplicate the other half: rank of the Gram is `Q / 2`.
pub fn half_duplicated_instance(n: usize, d: usize, h: usize, m: usize, seed: u64) -> Instance {
    assert!(m % 2 == 0);
    let s = synthesize(&SynthSpec { n, d, mu: GroundTruth::SumOfSines, sigma: 0.3, seed }).unwrap();
    let half = sample_rff(d, h, m / 2, 1.0, seed + 1).unwrap();
    let q2 = h * m / 2;
    let freqs = DMatrix::from_fn(h * m, d, |i, j| half.frequencies()[(i % q2, j)]);
    let phases = (0..h * m).map(|i| half.phases()[i % q2]).collect();
    let basis = BasisEnsemble::from_parts(h, m, 1.0, freqs, phases).unwrap();
    build(s.dataset.features.clone(), s.dataset.target(0), s.mu_values, basis)
}

/// `(1/N) sum_n phi(x_n) phi(x_n)^T` by explicit outer products.
pub fn brute_gram(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let q = phi.nrows();
    let n = phi.ncols();
    let mut g = DMatrix::zeros(q, q);
    for col in phi.column_iter() {
        for i in 0..q {
            for j in 0..q {
                g[(i, j)] += col[i] * col[j];
            }
        }
    }
    g / n as f64
}

/// Block diagonal part of a Q×Q matrix with H×H blocks.
pub fn block_diag(g: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| if i / h == j / h { g[(i, j)] } else { 0.0 })
}

/// `M(1-lambda) D + lambda G` with raw (unwhitened) matrices.
pub fn ncl_system(g: &DMatrix<f64>, h: usize, m: usize, lambda: f64) -> DMatrix<f64> {
    block_diag(g, h) * (m as f64 * (1.0 - lambda)) + g * lambda
}

/// Smoother matrix straight from its definition with an SVD pseudo-inverse.
pub fn direct_smoother(phi: &DMatrix<f64>, h: usize, m: usize, lambda: f64) -> DMatrix<f64> {
    let g = brute_gram(phi);
    let a = ncl_system(&g, h, m, lambda);
    let pinv = a.pseudo_inverse(1e-12).unwrap();
    phi.transpose() * pinv * phi / phi.ncols() as f64
}

/// Numerical rank from singular values.
pub fn svd_rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    sv.iter().filter(|&&s| s > a.nrows() as f64 * f64::EPSILON * max).count()
}

/// Averaged NCL loss as a function of the stacked member weights, computed
/// per example from member outputs.
pub fn ncl_objective_weights(phi: &DMatrix<f64>, y: &DVector<f64>, h: usize, m: usize, lambda: f64, w: &DVector<f64>) -> f64 {
    let n = phi.ncols();
    let mut total = 0.0;
    for i in 0..n {
        let members: Vec<f64> = (0..m).map(|k| w.rows(k * h, h).dot(&phi.view((k * h, i), (h, 1)))).collect();
        let f = members.iter().sum::<f64>() / m as f64;
        let err = members.iter().map(|p| (p - y[i]).powi(2)).sum::<f64>() / m as f64;
        total += (1.0 - lambda) * err + lambda * (f - y[i]).powi(2);
    }
    total / n as f64
}

/// Full-batch gradient descent on the averaged NCL loss in member weights;
/// returns `beta = w / M`. The gradient is the per-example chain rule
/// `(2/M)((1-lambda) f_m + lambda F - y) phi_m`.
pub fn gradient_descent_beta(phi: &DMatrix<f64>, y: &DVector<f64>, h: usize, m: usize, lambda: f64, iters: usize) -> DVector<f64> {
    let n = phi.ncols();
    let q = h * m;
    let mf = m as f64;
    // step from the largest curvature of the quadratic
    let g = brute_gram(phi);
    let hess = (block_diag(&g, h) * (1.0 - lambda) + &g * (lambda / mf)) * (2.0 / mf);
    let lmax = hess.symmetric_eigenvalues().max();
    let step = 1.0 / lmax;
    let mut w = DVector::zeros(q);
    let mut members = DMatrix::zeros(m, n);
    for _ in 0..iters {
        for k in 0..m {
            let wk = w.rows(k * h, h);
            for i in 0..n {
                members[(k, i)] = wk.dot(&phi.view((k * h, i), (h, 1)));
            }
        }
        let mut grad = DVector::zeros(q);
        for i in 0..n {
            let f = members.column(i).sum() / mf;
            for k in 0..m {
                let coef = 2.0 / mf * ((1.0 - lambda) * members[(k, i)] + lambda * f - y[i]) / n as f64;
                for j in 0..h {
                    grad[k * h + j] += coef * phi[(k * h + j, i)];
                }
            }
        }
        w -= grad * step;
    }
    w / mf
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
