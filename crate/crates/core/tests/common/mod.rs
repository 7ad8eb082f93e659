//! Test-side reference implementations, written directly from the formulas
//! and sharing no code with the crate under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Squared-exponential ARD kernel in its precision form.
pub fn se_ard(sigma2: f64, eta: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let r: f64 = eta.iter().zip(a.iter().zip(b)).map(|(e, (x, y))| e * (x - y) * (x - y)).sum();
    sigma2 * (-r).exp()
}

/// Isotropic RBF with length `s`.
pub fn rbf(s: f64, a: &[f64], b: &[f64]) -> f64 {
    let r: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-r / (2.0 * s * s)).exp()
}

/// Dense row-major matrix for the oracles.
pub type Dense = Vec<Vec<f64>>;

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &Dense) -> Dense {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `ln det` of a symmetric positive-definite matrix from its eigenvalues.
pub fn log_det_eigen(a: &Dense) -> f64 {
    let n = a.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
    m.symmetric_eigen().eigenvalues.iter().map(|l| l.ln()).sum()
}

pub fn min_eigenvalue(a: &Dense) -> f64 {
    let n = a.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
    m.symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn mat_vec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact GP posterior and evidence computed from an explicit inverse.
pub struct DirectGp {
    pub inverse: Dense,
    pub alpha: Vec<f64>,
    pub lml: f64,
}

impl DirectGp {
    pub fn new(k: &dyn Fn(&[f64], &[f64]) -> f64, x: &[Vec<f64>], y: &[f64], noise_var: f64) -> Self {
        let n = x.len();
        let c: Dense = (0..n)
            .map(|i| (0..n).map(|j| k(&x[i], &x[j]) + if i == j { noise_var } else { 0.0 }).collect())
            .collect();
        let inverse = gauss_jordan_inverse(&c);
        let alpha = mat_vec(&inverse, y);
        let lml = -0.5 * dot(y, &alpha) - 0.5 * log_det_eigen(&c) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Self { inverse, alpha, lml }
    }

    pub fn posterior(&self, k: &dyn Fn(&[f64], &[f64]) -> f64, x: &[Vec<f64>], z: &[f64]) -> (f64, f64) {
        let ks: Vec<f64> = x.iter().map(|xi| k(z, xi)).collect();
        let mean = dot(&ks, &self.alpha);
        let var = k(z, z) - dot(&ks, &mat_vec(&self.inverse, &ks));
        (mean, var)
    }
}

pub fn random_points(rng: &mut impl Rng, n: usize, dim: usize, half_width: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect()).collect()
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(actual: f64, expected: f64, floor: f64) -> f64 {
    (actual - expected).abs() / expected.abs().max(floor)
}

/// Fourth-order central difference `[f(-2h) - 8f(-h) + 8f(h) - f(2h)] / 12h`.
pub fn five_point(f: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Fourth-order central second difference.
pub fn five_point_second(f: &mut dyn FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(-2.0 * h) + 16.0 * f(-h) - 30.0 * f(0.0) + 16.0 * f(h) - f(2.0 * h)) / (12.0 * h * h)
}
