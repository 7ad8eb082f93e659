//! Subcommand implementations. Each writes into a staging directory next to
//! the requested output and renames it into place once complete, so a failed
//! run never leaves a half-written output directory behind.

use std::fs;
use std::path::{Path, PathBuf};

use prgp_core::data::Dataset;
use prgp_core::linalg::Matrix;
use prgp_core::simulate::{self, FieldGrid};
use prgp_core::trainer::{self, Draw, Progress, StopReason, TrainOutcome, TrainedModel, TrainingData};

use crate::checkpoint::Checkpoint;
use crate::cli::{Cli, Command, Overrides};
use crate::config::RunConfig;
use crate::dataio::{self, file_sha256, load_dataset, save_dataset, write_json, write_observations};
use crate::error::{AppError, Result};
use crate::eval::{self, dataset_label, RunLabel};

/// Name of the prepared dataset inside train/prepare output directories.
pub const DATASET_FILE: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Output directory under construction.
pub struct Staging {
    tmp: PathBuf,
    target: PathBuf,
}

impl Staging {
    /// Refuses to replace a non-empty directory that is not a previous
    /// output (one containing `config.toml`).
    pub fn begin(target: &Path) -> Result<Self> {
        if target.exists() {
            let empty = fs::read_dir(target).map_err(AppError::io(target))?.next().is_none();
            if !empty && !target.join(CONFIG_FILE).is_file() {
                return Err(AppError::Config(format!(
                    "{} exists and is not a previous output directory",
                    target.display()
                )));
            }
        }
        let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(AppError::io(parent))?;
        let tmp = parent.join(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(AppError::io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(AppError::io(&tmp))?;
        Ok(Self { tmp, target: target.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn commit(self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(AppError::io(&self.target))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(AppError::io(&self.target))?;
        Ok(self.target)
    }
}

fn write_config(staging: &Staging, config: &RunConfig) -> Result<()> {
    let path = staging.file(CONFIG_FILE);
    fs::write(&path, config.to_toml()?).map_err(AppError::io(&path))
}

fn require_out(config: &RunConfig) -> Result<PathBuf> {
    config.out.clone().ok_or_else(|| AppError::Config("missing --out".into()))
}

fn require_data(config: &RunConfig) -> Result<PathBuf> {
    config.data.clone().ok_or_else(|| AppError::Config("missing --data".into()))
}

fn base_config(cli_config: Option<&Path>) -> Result<RunConfig> {
    cli_config.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

pub fn run(cli: Cli) -> Result<()> {
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Simulate(o) => simulate_cmd(&resolve(config_path, &o)?),
        Command::Prepare(o) => prepare_cmd(&resolve(config_path, &o)?),
        Command::Train { overrides, resume } => match resume {
            Some(ckpt) => resume_cmd(config_path, &overrides, &ckpt),
            None => train_cmd(&resolve(config_path, &overrides)?),
        },
        Command::Estimate { checkpoint, overrides, nx, nt } => estimate_cmd(&checkpoint, &overrides, nx, nt),
        Command::Eval { checkpoint, overrides } => eval_cmd(&checkpoint, &overrides),
        Command::Matrix { overrides, seeds, models } => {
            let mut config = resolve(config_path, &overrides)?;
            if overrides.noise {
                config.matrix.clean = false;
                config.matrix.noisy = true;
            }
            if let Some(s) = seeds {
                config.matrix.seeds = s;
            }
            if let Some(m) = models {
                config.matrix.models = m;
            }
            matrix_cmd(&config)
        }
    }
}

fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut config = base_config(config_path)?;
    overrides.apply(&mut config);
    Ok(config)
}

/// Simulated field and sensor readings for the configured scenario.
pub fn simulate_data(config: &RunConfig) -> Result<(FieldGrid, Vec<prgp_core::data::Observation>)> {
    let grid = simulate::run(&config.simulate)?;
    let mut sensors = config.sensors.clone();
    sensors.seed = config.seed;
    let readings = simulate::virtual_sensors(&grid, &sensors)?;
    Ok((grid, readings))
}

pub fn simulate_cmd(config: &RunConfig) -> Result<()> {
    let staging = Staging::begin(&require_out(config)?)?;
    let (grid, readings) = simulate_data(config)?;
    write_observations(&staging.file("sensors.csv"), &readings)?;
    // About one stored time level per simulated minute.
    let per_minute = (1.0 / 60.0 / (config.simulate.dt * config.simulate.save_every as f64)).round() as usize;
    dataio::write_field_csv(&staging.file("field.csv"), &grid, per_minute.max(1))?;
    write_json(&staging.file("audit.json"), &grid.audit)?;
    write_config(&staging, config)?;
    let out = staging.commit()?;
    eprintln!(
        "wrote {} readings to {} (mass balance error {:.2e})",
        readings.len(),
        out.display(),
        grid.audit.relative_error()
    );
    Ok(())
}

/// Loads a CSV and brings it to the configured split/noise/standardization,
/// keeping whatever the sidecar already records.
pub fn prepared_dataset(path: &Path, config: &RunConfig) -> Result<Dataset> {
    let mut data = load_dataset(path)?;
    if data.split.is_none() {
        data = data.split(config.split.train_fraction, config.seed)?;
    }
    if config.noise.enabled && data.noise.is_none() {
        let n = &config.noise;
        data = data.inject_noise(n.fraction, n.amplitude, n.distribution, config.seed)?;
    }
    if data.standardization.is_none() {
        data = data.standardize()?;
    }
    Ok(data)
}

pub fn prepare_cmd(config: &RunConfig) -> Result<()> {
    let data = prepared_dataset(&require_data(config)?, config)?;
    let staging = Staging::begin(&require_out(config)?)?;
    save_dataset(&staging.file(DATASET_FILE), &data)?;
    write_config(&staging, config)?;
    let out = staging.commit()?;
    eprintln!(
        "prepared {} rows ({} train, {} dropped) in {}",
        data.len(),
        data.train_indices().len(),
        data.dropped_rows,
        out.display()
    );
    Ok(())
}

fn progress_printer() -> impl FnMut(&Progress) {
    |p: &Progress| {
        if p.iteration % 10 == 0 {
            eprintln!("iter={} elbo={} grad_norm={}", p.iteration, p.elbo, p.grad_norm);
        }
    }
}

pub fn train_cmd(config: &RunConfig) -> Result<()> {
    let data = prepared_dataset(&require_data(config)?, config)?;
    let training = TrainingData::from_dataset(&data)?;
    let init = config.initial_params(config.physics.model)?;
    let outcome = trainer::train(&training, &init, &config.train_config(), &mut progress_printer())?;
    finish_training(config, &data, &training, outcome)
}

/// Continues a checkpoint. Flags override the checkpoint's own configuration
/// (typically `--iters`); the dataset must be the one it was trained on.
pub fn resume_cmd(config_path: Option<&Path>, overrides: &Overrides, checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut config = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.config.clone(),
    };
    overrides.apply(&mut config);
    if config.physics.model != ckpt.params.physics.model {
        return Err(AppError::Config("cannot change the physics model when resuming".into()));
    }
    let data_path = overrides.data.clone().unwrap_or_else(|| sibling(checkpoint, DATASET_FILE));
    let data = checked_dataset(&data_path, &ckpt)?;
    config.data = Some(data_path);
    let training = TrainingData::from_dataset(&data)?;
    let outcome =
        trainer::resume(&training, &ckpt.params, ckpt.state.clone(), &config.train_config(), &mut progress_printer())?;
    finish_training(&config, &data, &training, outcome)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn checked_dataset(path: &Path, ckpt: &Checkpoint) -> Result<Dataset> {
    let hash = file_sha256(path)?;
    if hash != ckpt.data_hash {
        return Err(AppError::Config(format!("{} is not the dataset this checkpoint was trained on", path.display())));
    }
    let data = load_dataset(path)?;
    if data.standardization != Some(ckpt.standardization) {
        return Err(AppError::Config(format!("{}: standardization differs from the checkpoint", path.display())));
    }
    Ok(data)
}

fn finish_training(config: &RunConfig, data: &Dataset, training: &TrainingData, outcome: TrainOutcome) -> Result<()> {
    let staging = Staging::begin(&require_out(config)?)?;
    let data_path = staging.file(DATASET_FILE);
    save_dataset(&data_path, data)?;
    let ckpt = Checkpoint::new(&outcome, training.standardization, file_sha256(&data_path)?, config.clone());
    ckpt.save(&staging.file(CHECKPOINT_FILE))?;
    let mut trace = String::from("iteration,elbo\n");
    for (i, v) in outcome.state.elbo_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v}\n"));
    }
    let trace_path = staging.file("trace.csv");
    fs::write(&trace_path, trace).map_err(AppError::io(&trace_path))?;
    if outcome.params.physics.is_active() && outcome.error.is_none() {
        let draw = Draw::for_iteration(training, &config.train_config(), outcome.state.iteration)
            .into_iter()
            .next()
            .ok_or_else(|| AppError::Config("no pseudo-point draw".into()))?;
        let batch = trainer::residual_batch(training, &outcome.models, &outcome.params.physics, &draw)?;
        dataio::write_residuals_csv(&staging.file("residuals.csv"), &batch)?;
    }
    write_config(&staging, config)?;
    let out = staging.commit()?;
    let last = outcome.state.elbo_trace.last().copied().unwrap_or(f64::NAN);
    eprintln!("stop={:?} iterations={} elbo={} -> {}", outcome.stop, outcome.state.iteration, last, out.display());
    match (outcome.stop, outcome.error) {
        (StopReason::Aborted(_), Some(e)) => Err(AppError::Numerical(e)),
        _ => Ok(()),
    }
}

fn checkpoint_model(checkpoint: &Path, overrides: &Overrides) -> Result<(Checkpoint, Dataset, TrainedModel)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data_path = overrides.data.clone().unwrap_or_else(|| sibling(checkpoint, DATASET_FILE));
    let data = checked_dataset(&data_path, &ckpt)?;
    let training = TrainingData::from_dataset(&data)?;
    let model = TrainedModel::new(&training, &ckpt.params)?;
    Ok((ckpt, data, model))
}

pub fn estimate_cmd(checkpoint: &Path, overrides: &Overrides, nx: usize, nt: usize) -> Result<()> {
    if nx < 2 || nt < 2 {
        return Err(AppError::Config("--nx and --nt must be at least 2".into()));
    }
    let (ckpt, data, model) = checkpoint_model(checkpoint, overrides)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (x0, x1, t0, t1) = data.hull(&all).ok_or_else(|| AppError::Config("empty dataset".into()))?;
    let locations = Matrix::from_fn(nx * nt, 2, |r, d| {
        let (i, j) = (r % nx, r / nx);
        if d == 0 {
            x0 + (x1 - x0) * i as f64 / (nx - 1) as f64
        } else {
            t0 + (t1 - t0) * j as f64 / (nt - 1) as f64
        }
    });
    let est = model.estimate(&locations)?;
    let mut config = ckpt.config.clone();
    overrides.apply(&mut config);
    let staging = Staging::begin(&require_out(&config)?)?;
    let mut out = String::from("x,t,flow,flow_var,speed,speed_var,density,density_var\n");
    for r in 0..locations.rows() {
        out.push_str(&format!("{},{}", locations[(r, 0)], locations[(r, 1)]));
        for p in &est.outputs {
            out.push_str(&format!(",{},{}", p.mean[r], p.variance[r]));
        }
        out.push('\n');
    }
    let path = staging.file("estimate.csv");
    fs::write(&path, out).map_err(AppError::io(&path))?;
    write_config(&staging, &config)?;
    let dir = staging.commit()?;
    eprintln!("wrote {}x{} estimate grid to {}", nx, nt, dir.display());
    Ok(())
}

pub fn eval_cmd(checkpoint: &Path, overrides: &Overrides) -> Result<()> {
    let (ckpt, data, model) = checkpoint_model(checkpoint, overrides)?;
    let mut config = ckpt.config.clone();
    overrides.apply(&mut config);
    let label = RunLabel {
        model: ckpt.params.physics.model.name().to_string(),
        dataset: dataset_label(data.noise.is_some()).to_string(),
        seed: ckpt.config.seed,
        config_hash: ckpt.config.hash()?,
    };
    let evaluation = eval::score(&label, eval::predict_test(&model, &data)?)?;
    let staging = Staging::begin(&require_out(&config)?)?;
    let path = staging.file("report.csv");
    fs::write(&path, eval::report_csv(std::slice::from_ref(&evaluation.report))).map_err(AppError::io(&path))?;
    write_json(&staging.file("metrics.json"), &evaluation.report)?;
    eval::write_scatter(staging.path(), "scatter", &evaluation.predictions)?;
    write_config(&staging, &config)?;
    let dir = staging.commit()?;
    let r = &evaluation.report;
    eprintln!(
        "flow rmse={} mape={}% speed rmse={} mape={}% -> {}",
        r.flow_rmse,
        r.flow_mape,
        r.speed_rmse,
        r.speed_mape,
        dir.display()
    );
    Ok(())
}

/// The matrix's base dataset: `--data` when given, otherwise the configured
/// simulation.
pub fn matrix_base(config: &RunConfig) -> Result<Dataset> {
    match &config.data {
        Some(path) => {
            let mut d = load_dataset(path)?;
            d.split = None;
            d.noise = None;
            d.standardization = None;
            Ok(d)
        }
        None => Ok(Dataset::from_observations(simulate_data(config)?.1)?),
    }
}

pub fn matrix_cmd(config: &RunConfig) -> Result<()> {
    if config.matrix.models.is_empty() && !config.matrix.calibrated_baseline {
        return Err(AppError::Config("matrix has no models".into()));
    }
    let base = matrix_base(config)?;
    let staging = Staging::begin(&require_out(config)?)?;
    let bundle = eval::experiment_matrix(&base, config, &|cell, result| match result {
        Ok(e) => eprintln!("{}: flow_rmse={} speed_rmse={}", cell.name(), e.report.flow_rmse, e.report.speed_rmse),
        Err(err) => eprintln!("{}: failed: {err}", cell.name()),
    })?;
    eval::write_bundle(staging.path(), &bundle)?;
    write_config(&staging, config)?;
    let dir = staging.commit()?;
    eprintln!("{} cells, {} failed -> {}", bundle.evaluations.len() + bundle.failures.len(), bundle.failures.len(), dir.display());
    if bundle.evaluations.is_empty() {
        return Err(AppError::Config("every matrix cell failed; see failures.txt".into()));
    }
    Ok(())
}
