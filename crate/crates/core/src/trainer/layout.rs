use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ModelParams, Output};
use crate::error::{Error, Result};
use crate::math;
use crate::physics::PhysicalParam;

/// Positions of every trainable log-parameter inside the flat vector `θ`.
///
/// Order: for each output GP its kernel log-hyperparameters then `ln τ`; for
/// each shadow kernel its log-hyperparameters (the nugget is fixed); then the
/// logs of the physical parameters that enter the model's residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub outputs: Vec<Range<usize>>,
    pub shadow: Vec<Range<usize>>,
    pub physical: Vec<(PhysicalParam, usize)>,
    pub names: Vec<String>,
}

fn hyper_names(family: crate::kernel::KernelFamily, dim: usize) -> Vec<String> {
    use crate::kernel::KernelFamily::*;
    let mut v = Vec::new();
    if matches!(family, SeArd | Compound) {
        v.push("ln_signal_variance".into());
        for d in 0..dim {
            v.push(format!("ln_precision_{d}"));
        }
    }
    if matches!(family, Rbf | Compound) {
        v.push("ln_width".into());
    }
    v
}

impl ParamLayout {
    pub fn new(params: &ModelParams) -> Result<Self> {
        if params.outputs.len() != Output::ALL.len() {
            return Err(Error::DimensionMismatch { expected: Output::ALL.len(), found: params.outputs.len() });
        }
        let mut names = Vec::new();
        let mut outputs = Vec::new();
        for (o, k) in Output::ALL.iter().zip(&params.outputs) {
            k.validate()?;
            let start = names.len();
            names.extend(hyper_names(k.family, k.dim).into_iter().map(|n| format!("{}.{n}", o.name())));
            names.push(format!("{}.ln_noise_precision", o.name()));
            outputs.push(start..names.len());
        }
        let mut shadow = Vec::new();
        for (w, k) in params.physics.shadow.iter().enumerate() {
            k.validate()?;
            let start = names.len();
            names.extend(hyper_names(k.family, k.dim).into_iter().map(|n| format!("shadow{w}.{n}")));
            shadow.push(start..names.len());
        }
        let mut physical = Vec::new();
        for &p in params.physics.model.physical_params() {
            physical.push((p, names.len()));
            names.push(format!("physics.ln_{}", physical_name(p)));
        }
        Ok(Self { outputs, shadow, physical, names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn pack(&self, params: &ModelParams) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.len());
        for k in &params.outputs {
            theta.extend_from_slice(&k.log_hyper);
            theta.push(k.log_noise_precision);
        }
        for k in &params.physics.shadow {
            theta.extend_from_slice(&k.log_hyper);
        }
        for &(p, _) in &self.physical {
            theta.push(math::ln(params.physics.param(p)));
        }
        theta
    }

    pub fn unpack(&self, theta: &[f64], params: &mut ModelParams) {
        for (k, r) in params.outputs.iter_mut().zip(&self.outputs) {
            let n = r.len() - 1;
            k.log_hyper.copy_from_slice(&theta[r.start..r.start + n]);
            k.log_noise_precision = theta[r.end - 1];
        }
        for (k, r) in params.physics.shadow.iter_mut().zip(&self.shadow) {
            k.log_hyper.copy_from_slice(&theta[r.clone()]);
        }
        for &(p, i) in &self.physical {
            params.physics.set_param(p, math::exp(theta[i]));
        }
    }
}

pub(crate) fn physical_name(p: PhysicalParam) -> &'static str {
    match p {
        PhysicalParam::FreeFlowSpeed => "free_flow_speed",
        PhysicalParam::JamDensity => "jam_density",
        PhysicalParam::RelaxationTime => "relaxation_time",
        PhysicalParam::Anticipation => "anticipation",
        PhysicalParam::Diffusivity => "diffusivity",
    }
}
