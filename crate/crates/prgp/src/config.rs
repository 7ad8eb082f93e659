//! The run configuration: one TOML document covering every subcommand.
//! Missing sections and keys take defaults; the resolved configuration is
//! echoed into each output directory.

use std::fs;
use std::path::{Path, PathBuf};

use prgp_core::data::NoiseDistribution;
use prgp_core::kernel::KernelFamily;
use prgp_core::physics::{FundamentalDiagram, PhysicsModel, PhysicsSpec};
use prgp_core::simulate::{SensorConfig, SimConfig};
use prgp_core::trainer::{AdamConfig, DomainBox, GradientMethod, ModelParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::dataio::sha256_hex;
use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: SplitSection,
    pub noise: NoiseSection,
    pub train: TrainSection,
    pub physics: PhysicsSection,
    pub simulate: SimConfig,
    pub sensors: SensorConfig,
    pub matrix: MatrixSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            out: None,
            split: SplitSection::default(),
            noise: NoiseSection::default(),
            train: TrainSection::default(),
            physics: PhysicsSection::default(),
            simulate: SimConfig::corridor(),
            sensors: SensorConfig::default(),
            matrix: MatrixSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { train_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub enabled: bool,
    pub fraction: f64,
    /// veh/5min
    pub amplitude: f64,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { enabled: false, fraction: 0.5, amplitude: 100.0, distribution: NoiseDistribution::Uniform }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub kernel: KernelFamily,
    pub m: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub samples: usize,
    pub gradient: GradientMethod,
    pub stop_window: usize,
    pub stop_tolerance: f64,
    pub domain: Option<DomainBox>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            kernel: KernelFamily::SeArd,
            m: t.m,
            iterations: t.iterations,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            samples: t.samples,
            gradient: t.gradient,
            stop_window: t.stop_window,
            stop_tolerance: t.stop_tolerance,
            domain: t.domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub model: PhysicsModel,
    /// One value per residual equation, or a single value for all.
    pub gamma: Vec<f64>,
    pub shadow_kernel: KernelFamily,
    /// mph
    pub free_flow_speed: f64,
    /// veh/mile
    pub jam_density: f64,
    /// seconds
    pub relaxation_time_s: f64,
    /// mph²
    pub anticipation: f64,
    pub diffusivity: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        Self {
            model: PhysicsModel::None,
            gamma: vec![1.0],
            shadow_kernel: KernelFamily::SeArd,
            free_flow_speed: 65.0,
            jam_density: 200.0,
            relaxation_time_s: 30.0,
            anticipation: 100.0,
            diffusivity: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    pub models: Vec<PhysicsModel>,
    pub seeds: Vec<u64>,
    /// Run each cell on clean data.
    pub clean: bool,
    /// Run each cell on noise-corrupted data.
    pub noisy: bool,
    /// Add the calibrated-LWR simulation baseline to the report.
    pub calibrated_baseline: bool,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self { models: PhysicsModel::ALL.to_vec(), seeds: vec![0, 1, 2, 3, 4], clean: true, noisy: true, calibrated_baseline: true }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AppError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(AppError::io(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AppError::Config(format!("config: {e}")))
    }

    /// The configuration without input/output locations, which do not affect
    /// results.
    pub fn without_paths(&self) -> Self {
        Self { data: None, out: None, ..self.clone() }
    }

    /// SHA-256 of the canonical TOML serialization, locations excluded.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.without_paths().to_toml()?.as_bytes()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            m: t.m,
            iterations: t.iterations,
            adam: AdamConfig { learning_rate: t.learning_rate, beta1: t.beta1, beta2: t.beta2, epsilon: t.epsilon },
            seed: self.seed,
            domain: t.domain,
            samples: t.samples,
            gradient: t.gradient,
            stop_window: t.stop_window,
            stop_tolerance: t.stop_tolerance,
        }
    }

    pub fn physics_spec(&self, model: PhysicsModel) -> Result<PhysicsSpec> {
        let p = &self.physics;
        let mut spec = PhysicsSpec::new(model, &p.gamma, p.shadow_kernel)?;
        spec.fd = FundamentalDiagram::greenshields(p.free_flow_speed, p.jam_density)?;
        spec.relaxation_time = p.relaxation_time_s / 3600.0;
        spec.anticipation = p.anticipation;
        spec.diffusivity = p.diffusivity;
        spec.validate()?;
        Ok(spec)
    }

    pub fn initial_params(&self, model: PhysicsModel) -> Result<ModelParams> {
        Ok(ModelParams::initial(self.train.kernel, self.physics_spec(model)?)?)
    }
}
