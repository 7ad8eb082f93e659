//! Exact GP regression for one output dimension.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{gram, KernelOp, KernelParams, PreparedKernel};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::math;

/// Below this posterior variance the sample path is treated as deterministic:
/// `√ν` is held at `√VARIANCE_FLOOR` and contributes no spatial derivatives.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Fitted zero-mean GP. Immutable once built, so it can be shared across
/// threads for queries.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Matrix,
    targets: Vec<f64>,
    params: KernelParams,
    kernel: PreparedKernel,
    chol: Cholesky,
    alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Reparameterized draw `f̂ = μ + ε ⊙ √ν` at a set of locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub locations: Matrix,
    pub epsilon: Vec<f64>,
    pub values: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Posterior mean and variance with input derivatives at a set of points.
///
/// `*_grad` rows hold `∂/∂z_d`, `*_hess` rows hold the diagonal `∂²/∂z_d²`.
/// `variance` is clamped at zero; `raw_variance` is the unclamped value.
#[derive(Debug, Clone)]
pub struct PosteriorJet {
    pub mean: Vec<f64>,
    pub mean_grad: Matrix,
    pub mean_hess: Matrix,
    pub raw_variance: Vec<f64>,
    pub variance: Vec<f64>,
    pub variance_grad: Matrix,
    pub variance_hess: Matrix,
}

/// Value and derivatives of one reparameterized sample path at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [f64; 2],
}

impl GpModel {
    /// Factorizes `K + τ⁻¹ I` (with jitter escalation) and caches
    /// `α = (K + τ⁻¹ I)⁻¹ y`.
    pub fn fit(inputs: Matrix, targets: Vec<f64>, params: KernelParams) -> Result<Self> {
        params.validate()?;
        if inputs.rows() == 0 {
            return Err(Error::Empty("training inputs"));
        }
        if inputs.cols() != params.dim {
            return Err(Error::DimensionMismatch { expected: params.dim, found: inputs.cols() });
        }
        if targets.len() != inputs.rows() {
            return Err(Error::DimensionMismatch { expected: inputs.rows(), found: targets.len() });
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite training target".into()));
        }
        let kernel = params.prepare();
        let mut cov = gram(&kernel, &inputs, &inputs, KernelOp::Value);
        cov.add_diagonal(params.noise_variance());
        let chol = Cholesky::factor_with_jitter(&cov)?;
        let alpha = chol.solve(&targets);
        Ok(Self { inputs, targets, params, kernel, chol, alpha })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn kernel(&self) -> &PreparedKernel {
        &self.kernel
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// `(K + τ⁻¹ I)⁻¹`, formed explicitly.
    pub fn covariance_inverse(&self) -> Matrix {
        self.chol.inverse()
    }

    fn check_query(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.params.dim {
            return Err(Error::DimensionMismatch { expected: self.params.dim, found: z.cols() });
        }
        Ok(())
    }

    fn cross(&self, z: &[f64], op: KernelOp) -> Vec<f64> {
        (0..self.inputs.rows()).map(|n| self.kernel.eval_op(z, self.inputs.row(n), op)).collect()
    }

    /// Posterior mean `k*ᵀ α` and variance `k(z,z) - k*ᵀ (K+τ⁻¹I)⁻¹ k*`
    /// (clamped at zero).
    pub fn posterior(&self, z: &Matrix) -> Result<Posterior> {
        self.check_query(z)?;
        let kzz = self.kernel.diagonal();
        let mut mean = Vec::with_capacity(z.rows());
        let mut variance = Vec::with_capacity(z.rows());
        for j in 0..z.rows() {
            let k = self.cross(z.row(j), KernelOp::Value);
            mean.push(dot(&k, &self.alpha));
            let w = self.chol.solve_lower(&k);
            variance.push((kzz - dot(&w, &w)).max(0.0));
        }
        Ok(Posterior { mean, variance })
    }

    /// `log N(y | 0, K + τ⁻¹ I)` from the cached factor.
    pub fn log_marginal_likelihood(&self) -> f64 {
        -0.5 * (dot(&self.targets, &self.alpha)
            + self.chol.log_det()
            + self.targets.len() as f64 * math::LN_2PI)
    }

    /// Reparameterized posterior sample with `ε` drawn from a seeded generator.
    pub fn sample_posterior(&self, z: &Matrix, seed: u64) -> Result<PosteriorSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..z.rows()).map(|_| StandardNormal.sample(&mut rng)).collect();
        self.sample_with_epsilon(z, &eps)
    }

    /// Reparameterized posterior sample for caller-supplied `ε`.
    pub fn sample_with_epsilon(&self, z: &Matrix, epsilon: &[f64]) -> Result<PosteriorSample> {
        if epsilon.len() != z.rows() {
            return Err(Error::DimensionMismatch { expected: z.rows(), found: epsilon.len() });
        }
        let post = self.posterior(z)?;
        let values = post
            .mean
            .iter()
            .zip(&post.variance)
            .zip(epsilon)
            .map(|((m, v), e)| m + e * math::sqrt(*v))
            .collect();
        Ok(PosteriorSample {
            locations: z.clone(),
            epsilon: epsilon.to_vec(),
            values,
            mean: post.mean,
            variance: post.variance,
        })
    }

    /// `∇_z μ(z) = (∇_z k*)ᵀ α`.
    pub fn posterior_mean_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.params.dim {
            return Err(Error::DimensionMismatch { expected: self.params.dim, found: z.len() });
        }
        Ok((0..z.len()).map(|d| dot(&self.cross(z, KernelOp::Grad(d)), &self.alpha)).collect())
    }

    /// `∇_z ν(z) = -2 (∇_z k*)ᵀ (K+τ⁻¹I)⁻¹ k*` (gradient of the unclamped variance).
    pub fn posterior_variance_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.params.dim {
            return Err(Error::DimensionMismatch { expected: self.params.dim, found: z.len() });
        }
        let v = self.chol.solve(&self.cross(z, KernelOp::Value));
        Ok((0..z.len()).map(|d| -2.0 * dot(&self.cross(z, KernelOp::Grad(d)), &v)).collect())
    }

    /// Mean, variance and their first derivatives and diagonal second
    /// derivatives at every row of `z`.
    pub fn jet(&self, z: &Matrix) -> Result<PosteriorJet> {
        self.check_query(z)?;
        let d = self.params.dim;
        let m = z.rows();
        let kzz = self.kernel.diagonal();
        let mut jet = PosteriorJet {
            mean: vec![0.0; m],
            mean_grad: Matrix::zeros(m, d),
            mean_hess: Matrix::zeros(m, d),
            raw_variance: vec![0.0; m],
            variance: vec![0.0; m],
            variance_grad: Matrix::zeros(m, d),
            variance_hess: Matrix::zeros(m, d),
        };
        for j in 0..m {
            let zj = z.row(j);
            let k0 = self.cross(zj, KernelOp::Value);
            let v0 = self.chol.solve(&k0);
            jet.mean[j] = dot(&k0, &self.alpha);
            let raw = kzz - dot(&k0, &v0);
            jet.raw_variance[j] = raw;
            jet.variance[j] = raw.max(0.0);
            for dim in 0..d {
                let kg = self.cross(zj, KernelOp::Grad(dim));
                let kh = self.cross(zj, KernelOp::Hess(dim));
                let vg = self.chol.solve(&kg);
                jet.mean_grad[(j, dim)] = dot(&kg, &self.alpha);
                jet.mean_hess[(j, dim)] = dot(&kh, &self.alpha);
                jet.variance_grad[(j, dim)] = -2.0 * dot(&kg, &v0);
                jet.variance_hess[(j, dim)] = -2.0 * (dot(&kh, &v0) + dot(&kg, &vg));
            }
        }
        Ok(jet)
    }
}

impl PosteriorJet {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Sample path `μ + ε √ν` and its derivatives at point `j` along the
    /// first two input dimensions (missing dimensions read as zero), with `ε`
    /// held fixed.
    pub fn sample_point(&self, j: usize, eps: f64) -> SamplePoint {
        let nu = self.variance[j];
        let dims = self.mean_grad.cols().min(2);
        let mut p = SamplePoint { value: self.mean[j], grad: [0.0; 2], hess: [0.0; 2] };
        for d in 0..dims {
            p.grad[d] = self.mean_grad[(j, d)];
            p.hess[d] = self.mean_hess[(j, d)];
        }
        if nu <= VARIANCE_FLOOR {
            p.value += eps * math::sqrt(VARIANCE_FLOOR);
            return p;
        }
        let s = math::sqrt(nu);
        p.value += eps * s;
        for d in 0..dims {
            let g = self.variance_grad[(j, d)];
            let h = self.variance_hess[(j, d)];
            p.grad[d] += eps * g / (2.0 * s);
            p.hess[d] += eps * (h / (2.0 * s) - g * g / (4.0 * s * s * s));
        }
        p
    }
}
