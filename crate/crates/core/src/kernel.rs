//! Stationary kernels and their derivatives.
//!
//! Every supported family is a sum of exponentiated-quadratic parts
//! `A · exp(-Σ_d η_d (a_d - b_d)²)`:
//!
//! * SE-ARD: `σ² · exp(-(a-b)ᵀ diag(η) (a-b))`, one precision weight per input dimension.
//! * RBF: `exp(-‖a-b‖² / (2 s²))`, unit amplitude and a single width `s`.
//! * Compound: SE-ARD + RBF.
//!
//! Hyperparameters are stored as logarithms. Derivatives with respect to the
//! *first* argument are available up to the diagonal of the Hessian, and each
//! of those can be differentiated again with respect to the log-parameters.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SeArd,
    Rbf,
    Compound,
}

impl KernelFamily {
    /// Number of log-hyperparameters (noise excluded) for `dim` inputs.
    pub fn hyper_count(self, dim: usize) -> usize {
        match self {
            KernelFamily::SeArd => 1 + dim,
            KernelFamily::Rbf => 1,
            KernelFamily::Compound => 2 + dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::SeArd => "se-ard",
            KernelFamily::Rbf => "rbf",
            KernelFamily::Compound => "compound",
        }
    }
}

/// Kernel hyperparameters plus the observation-noise precision `τ`.
///
/// Layout of `log_hyper`:
/// SE-ARD `[ln σ², ln η_1 … ln η_d]`, RBF `[ln s]`, Compound `[ln σ², ln η_1 … ln η_d, ln s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub dim: usize,
    pub log_hyper: Vec<f64>,
    pub log_noise_precision: f64,
}

impl KernelParams {
    pub fn se_ard(signal_variance: f64, precisions: &[f64], noise_precision: f64) -> Result<Self> {
        check_positive(signal_variance)?;
        check_positive(noise_precision)?;
        let mut log_hyper = vec![math::ln(signal_variance)];
        for &p in precisions {
            check_positive(p)?;
            log_hyper.push(math::ln(p));
        }
        Ok(Self {
            family: KernelFamily::SeArd,
            dim: precisions.len(),
            log_hyper,
            log_noise_precision: math::ln(noise_precision),
        })
    }

    pub fn rbf(width: f64, dim: usize, noise_precision: f64) -> Result<Self> {
        check_positive(width)?;
        check_positive(noise_precision)?;
        Ok(Self {
            family: KernelFamily::Rbf,
            dim,
            log_hyper: vec![math::ln(width)],
            log_noise_precision: math::ln(noise_precision),
        })
    }

    pub fn compound(
        signal_variance: f64,
        precisions: &[f64],
        width: f64,
        noise_precision: f64,
    ) -> Result<Self> {
        let mut p = Self::se_ard(signal_variance, precisions, noise_precision)?;
        check_positive(width)?;
        p.family = KernelFamily::Compound;
        p.log_hyper.push(math::ln(width));
        Ok(p)
    }

    /// Default starting point: `σ² = 1`, `η = 0.5` per dimension, `s = 1`.
    pub fn initial(family: KernelFamily, dim: usize, noise_precision: f64) -> Result<Self> {
        let precisions = vec![0.5; dim];
        match family {
            KernelFamily::SeArd => Self::se_ard(1.0, &precisions, noise_precision),
            KernelFamily::Rbf => Self::rbf(1.0, dim, noise_precision),
            KernelFamily::Compound => Self::compound(1.0, &precisions, 1.0, noise_precision),
        }
    }

    pub fn noise_precision(&self) -> f64 {
        math::exp(self.log_noise_precision)
    }

    pub fn noise_variance(&self) -> f64 {
        math::exp(-self.log_noise_precision)
    }

    pub fn hyper_count(&self) -> usize {
        self.log_hyper.len()
    }

    pub fn prepare(&self) -> PreparedKernel {
        let d = self.dim;
        let mut parts = Vec::with_capacity(2);
        match self.family {
            KernelFamily::SeArd | KernelFamily::Compound => parts.push(Part {
                amp: math::exp(self.log_hyper[0]),
                prec: self.log_hyper[1..1 + d].iter().map(|v| math::exp(*v)).collect(),
                amp_slot: Some(0),
                prec_slots: PrecSlots::PerDim(1),
            }),
            KernelFamily::Rbf => {}
        }
        match self.family {
            KernelFamily::Rbf | KernelFamily::Compound => {
                let slot = self.log_hyper.len() - 1;
                let s2 = math::exp(2.0 * self.log_hyper[slot]);
                parts.push(Part {
                    amp: 1.0,
                    prec: vec![0.5 / s2; d],
                    amp_slot: None,
                    prec_slots: PrecSlots::Tied(slot),
                });
            }
            KernelFamily::SeArd => {}
        }
        PreparedKernel { dim: d, hyper_count: self.log_hyper.len(), parts }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.family.hyper_count(self.dim);
        if self.log_hyper.len() != expected {
            return Err(Error::DimensionMismatch { expected, found: self.log_hyper.len() });
        }
        if self.log_hyper.iter().chain([&self.log_noise_precision]).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite kernel log-parameter".into()));
        }
        Ok(())
    }
}

fn check_positive(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(alloc::format!("kernel parameter must be positive, got {v}")))
    }
}

/// Which derivative of `k(a, b)` with respect to `a` to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOp {
    Value,
    /// `∂k/∂a_d`
    Grad(usize),
    /// `∂²k/∂a_d²`
    Hess(usize),
}

#[derive(Debug, Clone)]
enum PrecSlots {
    /// `ln η_d` lives at `start + d`.
    PerDim(usize),
    /// All `η_d = 1/(2 s²)` for `ln s` at this slot, so `∂ ln η_d / ∂ ln s = -2`.
    Tied(usize),
}

#[derive(Debug, Clone)]
struct Part {
    amp: f64,
    prec: Vec<f64>,
    amp_slot: Option<usize>,
    prec_slots: PrecSlots,
}

/// Kernel with exponentiated parameters, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedKernel {
    dim: usize,
    hyper_count: usize,
    parts: Vec<Part>,
}

impl PreparedKernel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hyper_count(&self) -> usize {
        self.hyper_count
    }

    /// `k(z, z)`; constant because every family is stationary.
    pub fn diagonal(&self) -> f64 {
        self.parts.iter().map(|p| p.amp).sum()
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_op(a, b, KernelOp::Value)
    }

    pub fn eval_op(&self, a: &[f64], b: &[f64], op: KernelOp) -> f64 {
        self.parts.iter().map(|p| p.eval_op(a, b, op)).sum()
    }

    /// Adds `weight · ∂(op k)(a, b) / ∂ log-hyper` into `out[..hyper_count]`.
    pub fn accumulate_param_grad(&self, a: &[f64], b: &[f64], op: KernelOp, weight: f64, out: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        for p in &self.parts {
            p.accumulate_param_grad(a, b, op, weight, out);
        }
    }
}

impl Part {
    #[inline]
    fn base(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), e) in a.iter().zip(b).zip(&self.prec) {
            let d = x - y;
            s += e * d * d;
        }
        self.amp * math::exp(-s)
    }

    fn eval_op(&self, a: &[f64], b: &[f64], op: KernelOp) -> f64 {
        let k = self.base(a, b);
        match op {
            KernelOp::Value => k,
            KernelOp::Grad(d) => {
                let delta = a[d] - b[d];
                -2.0 * self.prec[d] * delta * k
            }
            KernelOp::Hess(d) => {
                let delta = a[d] - b[d];
                let e = self.prec[d];
                (4.0 * e * e * delta * delta - 2.0 * e) * k
            }
        }
    }

    fn accumulate_param_grad(&self, a: &[f64], b: &[f64], op: KernelOp, weight: f64, out: &mut [f64]) {
        let k = self.base(a, b);
        let val = match op {
            KernelOp::Value => k,
            KernelOp::Grad(d) => -2.0 * self.prec[d] * (a[d] - b[d]) * k,
            KernelOp::Hess(d) => {
                let delta = a[d] - b[d];
                let e = self.prec[d];
                (4.0 * e * e * delta * delta - 2.0 * e) * k
            }
        };
        if let Some(slot) = self.amp_slot {
            out[slot] += weight * val;
        }
        for e in 0..self.prec.len() {
            let delta_e = a[e] - b[e];
            // u_e = ∂(exponent)/∂ ln η_e
            let u = -self.prec[e] * delta_e * delta_e;
            let dval = match op {
                KernelOp::Value => u * k,
                KernelOp::Grad(d) => val * (if d == e { 1.0 } else { 0.0 } + u),
                KernelOp::Hess(d) => {
                    let extra = if d == e {
                        let p = self.prec[d];
                        let delta = a[d] - b[d];
                        (8.0 * p * p * delta * delta - 2.0 * p) * k
                    } else {
                        0.0
                    };
                    extra + val * u
                }
            };
            match self.prec_slots {
                PrecSlots::PerDim(start) => out[start + e] += weight * dval,
                PrecSlots::Tied(slot) => out[slot] += -2.0 * weight * dval,
            }
        }
    }
}

/// `k(a, b)` with a dimension check.
pub fn kernel_eval(params: &KernelParams, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(params.dim, a.len())?;
    check_dim(params.dim, b.len())?;
    Ok(params.prepare().eval(a, b))
}

/// Gram matrix `[k(x_i, x'_j)]` over the rows of two input matrices.
pub fn kernel_matrix(params: &KernelParams, x: &Matrix, x2: &Matrix) -> Result<Matrix> {
    check_dim(params.dim, x.cols())?;
    check_dim(params.dim, x2.cols())?;
    let k = params.prepare();
    Ok(gram(&k, x, x2, KernelOp::Value))
}

/// Gram matrix of `op k` with a prepared kernel. Symmetry is exploited when
/// both inputs are the same matrix and `op` is the plain value.
pub fn gram(k: &PreparedKernel, x: &Matrix, x2: &Matrix, op: KernelOp) -> Matrix {
    if op == KernelOp::Value && core::ptr::eq(x, x2) {
        let n = x.rows();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = k.eval(x.row(i), x.row(j));
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        return m;
    }
    Matrix::from_fn(x.rows(), x2.rows(), |i, j| k.eval_op(x.row(i), x2.row(j), op))
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
