//! Stochastic ELBO maximization over kernel, shadow-kernel and physical
//! parameters.
//!
//! One iteration: draw pseudo-points `Z` and frozen `ε`, refit the three output
//! GPs at the current `θ`, evaluate the single-sample ELBO and its gradient,
//! and take an Adam ascent step.

mod adam;
mod layout;
mod objective;

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnScale, Dataset, Standardization, BINS_PER_HOUR};
use crate::error::{Error, Result};
use crate::gp::{GpModel, Posterior};
use crate::kernel::{KernelFamily, KernelParams};
use crate::linalg::Matrix;
use crate::physics::PhysicsSpec;
use crate::rng::{rng_for, stream};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layout::ParamLayout;
pub use objective::{
    elbo, elbo_and_gradient, elbo_at, elbo_gradient_fd, elbo_terms, fit_models, residual_batch, residual_scales, ElboTerms,
};

/// The three modelled outputs, in GP order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    Flow,
    Speed,
    Density,
}

impl Output {
    pub const ALL: [Output; 3] = [Output::Flow, Output::Speed, Output::Density];

    pub fn name(self) -> &'static str {
        match self {
            Output::Flow => "flow",
            Output::Speed => "speed",
            Output::Density => "density",
        }
    }

    pub fn scale(self, st: &Standardization) -> ColumnScale {
        match self {
            Output::Flow => st.flow,
            Output::Speed => st.speed,
            Output::Density => st.density,
        }
    }

    /// Multiplier from data units to residual units (flow: veh/5min → veh/hour).
    pub fn unit_factor(self) -> f64 {
        match self {
            Output::Flow => BINS_PER_HOUR,
            _ => 1.0,
        }
    }
}

/// Pseudo-point sampling box in physical units (miles, hours).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub x_min: f64,
    pub x_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl DomainBox {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.t_min, self.t_max].iter().all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.t_min <= self.t_max;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("pseudo-point box must be finite with min <= max".into()))
        }
    }

    pub fn covers(&self, other: &DomainBox) -> bool {
        self.x_min <= other.x_min && self.x_max >= other.x_max && self.t_min <= other.t_min && self.t_max >= other.t_max
    }
}

/// `m` i.i.d. uniform draws over the box, as rows `(x, t)`.
pub fn sample_pseudo_inputs<R: Rng + ?Sized>(domain: &DomainBox, m: usize, rng: &mut R) -> Matrix {
    let mut z = Matrix::zeros(m, 2);
    for j in 0..m {
        z[(j, 0)] = domain.x_min + (domain.x_max - domain.x_min) * rng.random::<f64>();
        z[(j, 1)] = domain.t_min + (domain.t_max - domain.t_min) * rng.random::<f64>();
    }
    z
}

/// Standardized training inputs and targets for the three output GPs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    /// `N × 2` standardized `(x, t)`.
    pub inputs: Matrix,
    /// Standardized targets in [`Output::ALL`] order.
    pub targets: [Vec<f64>; 3],
    pub standardization: Standardization,
    /// Hull of the training rows, physical units.
    pub hull: DomainBox,
    /// Mean training speed, mph.
    pub mean_speed: f64,
}

impl TrainingData {
    /// Training rows of a split and standardized dataset.
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let st = data.standardization.ok_or_else(|| Error::InvalidConfig("dataset is not standardized".into()))?;
        let rows = data.train_indices();
        let (x_min, x_max, t_min, t_max) = data.hull(&rows).ok_or(Error::Empty("training split"))?;
        let mut inputs = Matrix::zeros(rows.len(), 2);
        let mut targets = [Vec::new(), Vec::new(), Vec::new()];
        for (r, &i) in rows.iter().enumerate() {
            let s = &data.samples[i];
            inputs[(r, 0)] = st.x.apply(s.x);
            inputs[(r, 1)] = st.t.apply(s.t);
            targets[0].push(st.flow.apply(s.flow));
            targets[1].push(st.speed.apply(s.speed));
            targets[2].push(st.density.apply(s.density));
        }
        Ok(Self {
            inputs,
            targets,
            standardization: st,
            hull: DomainBox { x_min, x_max, t_min, t_max },
            mean_speed: st.speed.mean,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Physical `(x, t)` rows to standardized inputs.
    pub fn standardize_inputs(&self, physical: &Matrix) -> Matrix {
        let st = &self.standardization;
        Matrix::from_fn(physical.rows(), 2, |i, d| {
            if d == 0 {
                st.x.apply(physical[(i, 0)])
            } else {
                st.t.apply(physical[(i, 1)])
            }
        })
    }
}

/// Every trainable quantity: one kernel per output GP plus the physics prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub outputs: Vec<KernelParams>,
    pub physics: PhysicsSpec,
}

/// Starting noise precision for the output GPs: noise variance 0.1 of the
/// (unit) standardized target variance.
pub const INITIAL_NOISE_PRECISION: f64 = 10.0;

impl ModelParams {
    pub fn initial(family: KernelFamily, physics: PhysicsSpec) -> Result<Self> {
        let k = KernelParams::initial(family, 2, INITIAL_NOISE_PRECISION)?;
        Ok(Self { outputs: alloc::vec![k.clone(), k.clone(), k], physics })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Pseudo-points per iteration.
    pub m: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Pseudo-point box; the training hull when absent.
    pub domain: Option<DomainBox>,
    /// Monte-Carlo draws averaged per iteration.
    pub samples: usize,
    pub gradient: GradientMethod,
    /// Stop when the means of the last two windows of this many ELBO values
    /// differ by less than `stop_tolerance` relative.
    pub stop_window: usize,
    pub stop_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 10,
            iterations: 500,
            adam: AdamConfig::default(),
            seed: 0,
            domain: None,
            samples: 1,
            gradient: GradientMethod::Analytic,
            stop_window: 50,
            stop_tolerance: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &TrainingData) -> Result<()> {
        if self.m == 0 || self.samples == 0 {
            return Err(Error::InvalidConfig("m and samples must be at least 1".into()));
        }
        self.adam.validate()?;
        if let Some(d) = &self.domain {
            d.validate()?;
            if !d.covers(&data.hull) {
                return Err(Error::InvalidConfig("pseudo-point box must cover the training data".into()));
            }
        }
        Ok(())
    }

    pub fn domain_for(&self, data: &TrainingData) -> DomainBox {
        self.domain.unwrap_or(data.hull)
    }
}

/// One Monte-Carlo draw: standardized pseudo-points and frozen `ε` per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub z: Matrix,
    pub epsilon: [Vec<f64>; 3],
}

impl Draw {
    /// Draws for `iteration`, a pure function of `(seed, iteration)`.
    pub fn for_iteration(data: &TrainingData, config: &TrainConfig, iteration: usize) -> Vec<Draw> {
        let domain = config.domain_for(data);
        (0..config.samples)
            .map(|s| {
                let index = ((iteration as u64) << 16) | s as u64;
                let z_phys = sample_pseudo_inputs(&domain, config.m, &mut rng_for(config.seed, stream::PSEUDO_POINTS, index));
                let mut rng = rng_for(config.seed, stream::EPSILON, index);
                let mut eps = || (0..config.m).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
                let epsilon = [eps(), eps(), eps()];
                Draw { z: data.standardize_inputs(&z_phys), epsilon }
            })
            .collect()
    }
}

/// Optimizer state; everything needed to continue a run deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub theta: Vec<f64>,
    pub adam: AdamState,
    /// Completed iterations.
    pub iteration: usize,
    pub elbo_trace: Vec<f64>,
}

impl TrainState {
    pub fn new(theta: Vec<f64>) -> Self {
        let n = theta.len();
        Self { theta, adam: AdamState::new(n), iteration: 0, elbo_trace: Vec::new() }
    }

    /// True once the last two windows of the trace have (relatively) equal means.
    pub fn converged(&self, window: usize, tolerance: f64) -> bool {
        let n = self.elbo_trace.len();
        if window == 0 || n < 2 * window {
            return false;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let last = mean(&self.elbo_trace[n - window..]);
        let prev = mean(&self.elbo_trace[n - 2 * window..n - window]);
        (last - prev).abs() <= tolerance * prev.abs().max(1e-300)
    }
}

/// Per-iteration report passed to the training observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub iteration: usize,
    pub elbo: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    IterationCap,
    Converged,
    /// Numerical failure; the state is the last good one.
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub layout: ParamLayout,
    pub state: TrainState,
    pub models: Vec<GpModel>,
    pub stop: StopReason,
    /// Error that caused an abort.
    pub error: Option<Error>,
}

/// Runs the stochastic inference loop from `init`.
pub fn train(
    data: &TrainingData,
    init: &ModelParams,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome> {
    let layout = ParamLayout::new(init)?;
    let state = TrainState::new(layout.pack(init));
    resume(data, init, state, config, observer)
}

/// Continues from a saved state. `template` supplies the structure (families,
/// physics model, fixed shadow nuggets); its values are overwritten by `θ`.
pub fn resume(
    data: &TrainingData,
    template: &ModelParams,
    mut state: TrainState,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome> {
    config.validate(data)?;
    template.physics.validate()?;
    let layout = ParamLayout::new(template)?;
    if state.theta.len() != layout.len() || state.adam.m.len() != layout.len() {
        return Err(Error::DimensionMismatch { expected: layout.len(), found: state.theta.len() });
    }
    let mut params = template.clone();
    let mut stop = StopReason::IterationCap;
    let mut error = None;
    while state.iteration < config.iterations {
        if state.converged(config.stop_window, config.stop_tolerance) {
            stop = StopReason::Converged;
            break;
        }
        match iterate(data, &layout, &mut params, &state, config) {
            Ok((value, grad)) => {
                let grad_norm = crate::math::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
                observer(&Progress { iteration: state.iteration, elbo: value, grad_norm });
                let mut next = state.clone();
                adam_step(&mut next.theta, &grad, &mut next.adam, &config.adam)
                    .map_err(|_| nonfinite_gradient(&grad, state.iteration))?;
                next.elbo_trace.push(value);
                next.iteration += 1;
                state = next;
            }
            Err(e) => {
                stop = StopReason::Aborted(alloc::format!("{e}"));
                error = Some(e);
                break;
            }
        }
    }
    if stop == StopReason::IterationCap && state.converged(config.stop_window, config.stop_tolerance) {
        stop = StopReason::Converged;
    }
    layout.unpack(&state.theta, &mut params);
    let models = fit_models(data, &params)?;
    Ok(TrainOutcome { params, layout, state, models, stop, error })
}

fn nonfinite_gradient(grad: &[f64], iteration: usize) -> Error {
    let index = grad.iter().position(|g| !g.is_finite()).unwrap_or(0);
    Error::NonFiniteGradient { iteration, index }
}

fn iterate(
    data: &TrainingData,
    layout: &ParamLayout,
    params: &mut ModelParams,
    state: &TrainState,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    layout.unpack(&state.theta, params);
    let draws = Draw::for_iteration(data, config, state.iteration);
    let (value, grad) = match config.gradient {
        GradientMethod::Analytic => {
            let models = fit_models(data, params)?;
            elbo_and_gradient(data, layout, &models, &params.physics, &draws)?
        }
        GradientMethod::FiniteDifference => {
            let value = elbo_at(data, layout, params, &state.theta, &draws)?;
            (value, elbo_gradient_fd(data, layout, params, &state.theta, &draws, 1e-5)?)
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: state.iteration });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(nonfinite_gradient(&grad, state.iteration));
    }
    Ok((value, grad))
}

/// Per-output posterior moments in data units (flow veh/5min, speed mph,
/// density veh/mile).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEstimate {
    /// Query rows `(x, t)`, physical units.
    pub locations: Matrix,
    /// In [`Output::ALL`] order.
    pub outputs: Vec<Posterior>,
}

/// Fitted output GPs together with the constants needed to query them in
/// physical units.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub models: Vec<GpModel>,
    pub standardization: Standardization,
}

impl TrainedModel {
    pub fn new(data: &TrainingData, params: &ModelParams) -> Result<Self> {
        Ok(Self { models: fit_models(data, params)?, standardization: data.standardization })
    }

    /// Posterior mean and variance at physical `(x, t)` rows.
    pub fn estimate(&self, locations: &Matrix) -> Result<FieldEstimate> {
        if locations.cols() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: locations.cols() });
        }
        let st = &self.standardization;
        let z = Matrix::from_fn(locations.rows(), 2, |i, d| {
            if d == 0 {
                st.x.apply(locations[(i, 0)])
            } else {
                st.t.apply(locations[(i, 1)])
            }
        });
        let mut outputs = Vec::with_capacity(3);
        for (o, model) in Output::ALL.iter().zip(&self.models) {
            let scale = o.scale(st);
            let p = model.posterior(&z)?;
            outputs.push(Posterior {
                mean: p.mean.iter().map(|m| scale.invert(*m)).collect(),
                variance: p.variance.iter().map(|v| v * scale.std * scale.std).collect(),
            });
        }
        Ok(FieldEstimate { locations: locations.clone(), outputs })
    }
}
