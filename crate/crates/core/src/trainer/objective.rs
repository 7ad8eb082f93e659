//! The single-sample ELBO and its gradient.
//!
//! ```text
//! L(θ) = Σ_o log N(y_o | 0, K_o + τ_o⁻¹ I)
//!      + Σ_c γ_w(c) · log N(g_c | 0, s_c² (K̂_w(c)(Z, Z) + τ̂⁻¹ I))
//! ```
//!
//! `g_c` is residual channel `c` evaluated on the reparameterized sample paths
//! `μ_o + ε_o √ν_o` at the pseudo-points, and `s_c` is a fixed residual scale
//! derived from the standardization constants so that a unit-amplitude
//! shadow kernel is sensibly sized for residuals in physical units.
//!
//! The analytic gradient is a reverse sweep: residual partials come from
//! forward-mode duals, are pulled back through the sample-path formula to the
//! posterior mean/variance jets, from there to the cross-covariance vectors
//! and the training covariance, and finally contracted with the kernel's
//! parameter derivatives.

use alloc::vec;
use alloc::vec::Vec;

use super::{Draw, ModelParams, Output, ParamLayout, TrainingData};
use crate::error::{Error, Result};
use crate::gp::{GpModel, PosteriorJet, SamplePoint, VARIANCE_FLOOR};
use crate::kernel::{gram, KernelOp, PreparedKernel};
use crate::linalg::{Cholesky, Matrix};
use crate::math;
use crate::physics::{
    residuals, Dual, FieldJet, PhysicalParam, PhysicalParams, PhysicsModel, PhysicsSpec, Real, ResidualBatch,
    TrafficJet,
};

/// Dual slots: `4·o + D` for output `o` and derivative `D` in
/// (value, ∂x, ∂t, ∂xx), then one per physical parameter.
const PARAM_SLOT: usize = 12;
const SLOTS: usize = PARAM_SLOT + PhysicalParam::ALL.len();
type D = Dual<SLOTS>;

const OPS: [KernelOp; 4] = [KernelOp::Value, KernelOp::Grad(0), KernelOp::Grad(1), KernelOp::Hess(0)];

/// Refits the three output GPs at `params`.
pub fn fit_models(data: &TrainingData, params: &ModelParams) -> Result<Vec<GpModel>> {
    if params.outputs.len() != Output::ALL.len() {
        return Err(Error::DimensionMismatch { expected: Output::ALL.len(), found: params.outputs.len() });
    }
    params
        .outputs
        .iter()
        .zip(&data.targets)
        .map(|(k, y)| GpModel::fit(data.inputs.clone(), y.clone(), k.clone()))
        .collect()
}

/// Affine map from the standardized sample jet of one output to residual
/// units: value offset, then factors for (value, ∂x, ∂t, ∂xx).
struct JetScale {
    offset: f64,
    factors: [f64; 4],
}

fn jet_scales(data: &TrainingData) -> [JetScale; 3] {
    let st = &data.standardization;
    let (sx, stt) = (st.x.std, st.t.std);
    Output::ALL.map(|o| {
        let c = o.scale(st);
        let u = o.unit_factor();
        let a = u * c.std;
        JetScale { offset: u * c.mean, factors: [a, a / sx, a / stt, a / (sx * sx)] }
    })
}

/// Typical magnitude `s_c` of each residual channel, from the data scales.
pub fn residual_scales(data: &TrainingData, model: PhysicsModel) -> Vec<f64> {
    let st = &data.standardization;
    let (sx, stt) = (st.x.std, st.t.std);
    let flow = Output::Flow.unit_factor() * st.flow.std;
    let conservation = st.density.std / stt + flow / sx;
    let momentum = st.speed.std / stt + math::abs(data.mean_speed) * st.speed.std / sx;
    let heat = |s: f64| s / stt + s / (sx * sx);
    match model {
        PhysicsModel::None => Vec::new(),
        PhysicsModel::Lwr => vec![conservation],
        PhysicsModel::Pw | PhysicsModel::Arz => vec![conservation, momentum],
        PhysicsModel::Heat => vec![heat(flow), heat(st.speed.std), heat(st.density.std)],
    }
}

fn field<R: Real>(p: &SamplePoint, s: &JetScale, lift: impl Fn(f64, usize) -> R) -> FieldJet<R> {
    FieldJet {
        value: lift(s.offset + s.factors[0] * p.value, 0),
        dx: lift(s.factors[1] * p.grad[0], 1),
        dt: lift(s.factors[2] * p.grad[1], 2),
        dxx: lift(s.factors[3] * p.hess[0], 3),
    }
}

fn traffic_jet<R: Real>(points: &[SamplePoint; 3], scales: &[JetScale; 3], lift: impl Fn(usize, f64, usize) -> R) -> TrafficJet<R> {
    TrafficJet {
        flow: field(&points[0], &scales[0], |v, d| lift(0, v, d)),
        speed: field(&points[1], &scales[1], |v, d| lift(1, v, d)),
        density: field(&points[2], &scales[2], |v, d| lift(2, v, d)),
    }
}

fn jets(models: &[GpModel], z: &Matrix) -> Result<Vec<PosteriorJet>> {
    models.iter().map(|m| m.jet(z)).collect()
}

fn sample_points(jets: &[PosteriorJet], draw: &Draw, j: usize) -> [SamplePoint; 3] {
    [0, 1, 2].map(|o| jets[o].sample_point(j, draw.epsilon[o][j]))
}

/// Physical residuals of `spec.model` on one draw's sample paths.
pub fn residual_batch(data: &TrainingData, models: &[GpModel], spec: &PhysicsSpec, draw: &Draw) -> Result<ResidualBatch> {
    let scales = jet_scales(data);
    let js = jets(models, &draw.z)?;
    let traffic: Vec<TrafficJet<f64>> = (0..draw.z.rows())
        .map(|j| traffic_jet(&sample_points(&js, draw, j), &scales, |_, v, _| v))
        .collect();
    let st = &data.standardization;
    let locations = Matrix::from_fn(draw.z.rows(), 2, |i, d| {
        if d == 0 {
            st.x.invert(draw.z[(i, 0)])
        } else {
            st.t.invert(draw.z[(i, 1)])
        }
    });
    ResidualBatch::evaluate(spec, locations, &traffic)
}

/// The ELBO split into its data and regularizer parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// Log marginal likelihood per output.
    pub data: Vec<f64>,
    /// `γ_w · log N(g_c | ...)` per residual channel, averaged over draws.
    pub regularizer: Vec<f64>,
    pub total: f64,
}

/// Shadow covariance factor for one equation on a draw.
struct Shadow {
    kernel: PreparedKernel,
    chol: Cholesky,
}

fn shadow(spec: &PhysicsSpec, w: usize, z: &Matrix) -> Result<Shadow> {
    let params = &spec.shadow[w];
    let kernel = params.prepare();
    let mut cov = gram(&kernel, z, z, KernelOp::Value);
    cov.add_diagonal(params.noise_variance());
    Ok(Shadow { chol: Cholesky::factor_with_jitter(&cov)?, kernel })
}

fn channel_active(spec: &PhysicsSpec, w: usize) -> bool {
    spec.model != PhysicsModel::None && spec.gammas[w] > 0.0
}

pub fn elbo_terms(data: &TrainingData, models: &[GpModel], spec: &PhysicsSpec, draws: &[Draw]) -> Result<ElboTerms> {
    let data_terms: Vec<f64> = models.iter().map(GpModel::log_marginal_likelihood).collect();
    let channels = spec.model.channels();
    let mut reg = vec![0.0; channels.len()];
    if spec.is_active() {
        let scales = jet_scales(data);
        let s_c = residual_scales(data, spec.model);
        let p = spec.physical_params::<f64>();
        let weight = 1.0 / draws.len() as f64;
        for draw in draws {
            let m = draw.z.rows();
            let js = jets(models, &draw.z)?;
            let mut g = vec![Vec::with_capacity(m); channels.len()];
            for j in 0..m {
                let jet = traffic_jet(&sample_points(&js, draw, j), &scales, |_, v, _| v);
                for (c, r) in residuals(spec.model, &jet, &p).into_iter().enumerate() {
                    g[c].push(r);
                }
            }
            for w in 0..spec.model.equation_count() {
                if !channel_active(spec, w) {
                    continue;
                }
                let sh = shadow(spec, w, &draw.z)?;
                for c in (0..channels.len()).filter(|&c| channels[c] == w) {
                    let scaled: Vec<f64> = g[c].iter().map(|r| r / s_c[c]).collect();
                    let log_density = sh.chol.gaussian_log_density(&scaled) - m as f64 * math::ln(s_c[c]);
                    reg[c] += weight * spec.gammas[w] * log_density;
                }
            }
        }
    }
    let total = data_terms.iter().sum::<f64>() + reg.iter().sum::<f64>();
    Ok(ElboTerms { data: data_terms, regularizer: reg, total })
}

/// Single-sample ELBO estimate (averaged over `draws`).
pub fn elbo(data: &TrainingData, models: &[GpModel], spec: &PhysicsSpec, draws: &[Draw]) -> Result<f64> {
    Ok(elbo_terms(data, models, spec, draws)?.total)
}

/// ELBO at a flat parameter vector, refitting the output GPs.
pub fn elbo_at(data: &TrainingData, layout: &ParamLayout, template: &ModelParams, theta: &[f64], draws: &[Draw]) -> Result<f64> {
    let mut params = template.clone();
    layout.unpack(theta, &mut params);
    let models = fit_models(data, &params)?;
    elbo(data, &models, &params.physics, draws)
}

/// Central finite differences of [`elbo_at`] with step `h` in log-space.
pub fn elbo_gradient_fd(
    data: &TrainingData,
    layout: &ParamLayout,
    template: &ModelParams,
    theta: &[f64],
    draws: &[Draw],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = elbo_at(data, layout, template, &probe, draws)?;
        probe[i] = theta[i] - h;
        let down = elbo_at(data, layout, template, &probe, draws)?;
        probe[i] = theta[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Reverse-mode accumulators for one output GP.
struct OutputAdjoint {
    /// `∂L/∂C` for `C = K + τ⁻¹ I` (not symmetrized).
    cov: Matrix,
}

/// ELBO value and its analytic gradient with respect to `θ` (laid out by
/// `layout`), for GPs already fitted at the corresponding parameters.
pub fn elbo_and_gradient(
    data: &TrainingData,
    layout: &ParamLayout,
    models: &[GpModel],
    spec: &PhysicsSpec,
    draws: &[Draw],
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    let mut grad = vec![0.0; layout.len()];
    let mut value = 0.0;
    let mut adj: Vec<OutputAdjoint> = Vec::with_capacity(models.len());
    for model in models {
        value += model.log_marginal_likelihood();
        let a = model.alpha();
        let cinv = model.covariance_inverse();
        let cov = Matrix::from_fn(n, n, |i, j| 0.5 * (a[i] * a[j] - cinv[(i, j)]));
        adj.push(OutputAdjoint { cov });
    }

    if spec.is_active() {
        value += regularizer_backward(data, layout, models, spec, draws, &mut adj, &mut grad)?;
    }

    for (o, model) in models.iter().enumerate() {
        let range = layout.outputs[o].clone();
        let split = range.len() - 1;
        let (hyper, noise) = grad[range].split_at_mut(split);
        let x = model.inputs();
        let k = model.kernel();
        let cov = &adj[o].cov;
        for i in 0..n {
            k.accumulate_param_grad(x.row(i), x.row(i), KernelOp::Value, cov[(i, i)], hyper);
            for j in 0..i {
                k.accumulate_param_grad(x.row(i), x.row(j), KernelOp::Value, cov[(i, j)] + cov[(j, i)], hyper);
            }
        }
        noise[0] += -model.params().noise_variance() * cov.trace();
    }
    Ok((value, grad))
}

/// Adds the regularizer's contributions to `grad` and the covariance
/// adjoints; returns its value.
fn regularizer_backward(
    data: &TrainingData,
    layout: &ParamLayout,
    models: &[GpModel],
    spec: &PhysicsSpec,
    draws: &[Draw],
    adj: &mut [OutputAdjoint],
    grad: &mut [f64],
) -> Result<f64> {
    let scales = jet_scales(data);
    let s_c = residual_scales(data, spec.model);
    let channels = spec.model.channels();
    let params: PhysicalParams<D> = {
        let slot = |p: PhysicalParam| {
            let v = spec.param(p);
            D::variable(v, PARAM_SLOT + p.index(), v)
        };
        PhysicalParams {
            free_flow_speed: slot(PhysicalParam::FreeFlowSpeed),
            jam_density: slot(PhysicalParam::JamDensity),
            relaxation_time: slot(PhysicalParam::RelaxationTime),
            anticipation: slot(PhysicalParam::Anticipation),
            diffusivity: slot(PhysicalParam::Diffusivity),
        }
    };
    let weight = 1.0 / draws.len() as f64;
    let mut value = 0.0;

    for draw in draws {
        let z = &draw.z;
        let m = z.rows();
        let js = jets(models, z)?;
        let mut g: Vec<Vec<D>> = vec![Vec::with_capacity(m); channels.len()];
        for j in 0..m {
            let jet = traffic_jet(&sample_points(&js, draw, j), &scales, |o, v, d| D::variable(v, 4 * o + d, 1.0));
            for (c, r) in residuals(spec.model, &jet, &params).into_iter().enumerate() {
                g[c].push(r);
            }
        }

        // ∂L/∂g per channel and point, plus shadow-kernel gradients.
        let mut bar_g = vec![vec![0.0; m]; channels.len()];
        for w in 0..spec.model.equation_count() {
            if !channel_active(spec, w) {
                continue;
            }
            let gamma = weight * spec.gammas[w];
            let sh = shadow(spec, w, z)?;
            let sinv = sh.chol.inverse();
            let mut outer = Matrix::zeros(m, m);
            let mut count = 0.0;
            for c in (0..channels.len()).filter(|&c| channels[c] == w) {
                let scaled: Vec<f64> = g[c].iter().map(|r| r.v / s_c[c]).collect();
                value += gamma * (sh.chol.gaussian_log_density(&scaled) - m as f64 * math::ln(s_c[c]));
                let beta = sh.chol.solve(&scaled);
                for j in 0..m {
                    bar_g[c][j] = -gamma * beta[j] / s_c[c];
                    for i in 0..m {
                        outer[(i, j)] += beta[i] * beta[j];
                    }
                }
                count += 1.0;
            }
            let out = &mut grad[layout.shadow[w].clone()];
            for i in 0..m {
                for j in 0..=i {
                    let wij = 0.5 * gamma * (outer[(i, j)] - count * sinv[(i, j)]);
                    let wij = if i == j { wij } else { 2.0 * wij };
                    sh.kernel.accumulate_param_grad(z.row(i), z.row(j), KernelOp::Value, wij, out);
                }
            }
        }

        for &(p, idx) in &layout.physical {
            let slot = PARAM_SLOT + p.index();
            grad[idx] += (0..channels.len()).flat_map(|c| (0..m).map(move |j| (c, j))).map(|(c, j)| bar_g[c][j] * g[c][j].d[slot]).sum::<f64>();
        }

        for (o, model) in models.iter().enumerate() {
            let out = &mut grad[layout.outputs[o].start..layout.outputs[o].end - 1];
            for j in 0..m {
                let mut bar_f = [0.0; 4];
                for (d, b) in bar_f.iter_mut().enumerate() {
                    let slot = 4 * o + d;
                    let sum: f64 = (0..channels.len()).map(|c| bar_g[c][j] * g[c][j].d[slot]).sum();
                    *b = sum * scales[o].factors[d];
                }
                if bar_f.iter().all(|b| *b == 0.0) {
                    continue;
                }
                pull_back_point(model, &js[o], j, draw.epsilon[o][j], z.row(j), bar_f, &mut adj[o].cov, out);
            }
        }
    }
    Ok(value)
}

/// Pulls `∂L/∂(f, f_x, f_t, f_xx)` of one sample path at one point back to
/// the covariance adjoint and the kernel-parameter gradient.
#[allow(clippy::too_many_arguments)]
fn pull_back_point(
    model: &GpModel,
    jet: &PosteriorJet,
    j: usize,
    eps: f64,
    zj: &[f64],
    bar_f: [f64; 4],
    bar_cov: &mut Matrix,
    out: &mut [f64],
) {
    let bar_mu = bar_f;
    let (mut bar_nu, mut bar_nux, mut bar_nut, mut bar_nuxx) = (0.0, 0.0, 0.0, 0.0);
    let nu = jet.variance[j];
    if nu > VARIANCE_FLOOR {
        let s = math::sqrt(nu);
        let (nux, nut, nuxx) = (jet.variance_grad[(j, 0)], jet.variance_grad[(j, 1)], jet.variance_hess[(j, 0)]);
        let (s2, s3) = (s * s, s * s * s);
        let bar_s = eps * bar_f[0] - eps * nux / (2.0 * s2) * bar_f[1] - eps * nut / (2.0 * s2) * bar_f[2]
            + eps * (-nuxx / (2.0 * s2) + 3.0 * nux * nux / (4.0 * s2 * s2)) * bar_f[3];
        bar_nu = bar_s / (2.0 * s);
        bar_nux = eps / (2.0 * s) * bar_f[1] - eps * nux / (2.0 * s3) * bar_f[3];
        bar_nut = eps / (2.0 * s) * bar_f[2];
        bar_nuxx = eps / (2.0 * s) * bar_f[3];
    }

    let x = model.inputs();
    let n = x.rows();
    let kernel = model.kernel();
    let alpha = model.alpha();
    let chol = model.cholesky();
    let k: Vec<Vec<f64>> = OPS.iter().map(|&op| (0..n).map(|i| kernel.eval_op(zj, x.row(i), op)).collect()).collect();
    let v: Vec<Vec<f64>> = k.iter().map(|kd| chol.solve(kd)).collect();

    let mut bar_k = vec![vec![0.0; n]; 4];
    for i in 0..n {
        bar_k[0][i] = bar_mu[0] * alpha[i]
            - 2.0 * (bar_nu * v[0][i] + bar_nux * v[1][i] + bar_nut * v[2][i] + bar_nuxx * v[3][i]);
        bar_k[1][i] = bar_mu[1] * alpha[i] - 2.0 * bar_nux * v[0][i] - 4.0 * bar_nuxx * v[1][i];
        bar_k[2][i] = bar_mu[2] * alpha[i] - 2.0 * bar_nut * v[0][i];
        bar_k[3][i] = bar_mu[3] * alpha[i] - 2.0 * bar_nuxx * v[0][i];
    }

    // ∂μ/∂C = -(C⁻¹k) αᵀ and the variance quadratic forms.
    for a in 0..n {
        let w = bar_mu[0] * v[0][a] + bar_mu[1] * v[1][a] + bar_mu[2] * v[2][a] + bar_mu[3] * v[3][a];
        let left0 = bar_nu * v[0][a] + 2.0 * (bar_nux * v[1][a] + bar_nut * v[2][a] + bar_nuxx * v[3][a]);
        let left1 = 2.0 * bar_nuxx * v[1][a];
        let row = bar_cov.row_mut(a);
        for b in 0..n {
            row[b] += -w * alpha[b] + left0 * v[0][b] + left1 * v[1][b];
        }
    }

    for (d, &op) in OPS.iter().enumerate() {
        for i in 0..n {
            kernel.accumulate_param_grad(zj, x.row(i), op, bar_k[d][i], out);
        }
    }
    kernel.accumulate_param_grad(zj, zj, KernelOp::Value, bar_nu, out);
}
