use std::path::Path;

use prgp_core::data::Standardization;
use prgp_core::trainer::{ModelParams, StopReason, TrainOutcome, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{read_json, write_json};
use crate::error::{AppError, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to query a trained model or continue its training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    /// Parameter structure and values at `state.theta`.
    pub params: ModelParams,
    /// Name of each `θ` coordinate.
    pub theta_names: Vec<String>,
    pub state: TrainState,
    pub stop: StopReason,
    pub standardization: Standardization,
    /// SHA-256 of the prepared dataset CSV the model was trained on.
    pub data_hash: String,
    /// Run configuration with locations removed.
    pub config: RunConfig,
}

impl Checkpoint {
    pub fn new(outcome: &TrainOutcome, standardization: Standardization, data_hash: String, config: RunConfig) -> Self {
        Self {
            format: FORMAT_VERSION,
            params: outcome.params.clone(),
            theta_names: outcome.layout.names.clone(),
            state: outcome.state.clone(),
            stop: outcome.stop.clone(),
            standardization,
            data_hash,
            config: config.without_paths(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        if c.format != FORMAT_VERSION {
            return Err(AppError::Config(format!("{}: unsupported checkpoint format {}", path.display(), c.format)));
        }
        Ok(c)
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.state.elbo_trace.last().copied()
    }
}
