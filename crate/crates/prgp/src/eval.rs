//! Test-split evaluation, the two baselines and the experiment matrix.
//!
//! Every matrix cell is independent, so cells run in parallel; results are
//! gathered back into a fixed order (dataset, model, seed) so the bundle is
//! byte-identical across runs and thread counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use prgp_core::data::{Dataset, BINS_PER_HOUR};
use prgp_core::linalg::Matrix;
use prgp_core::metrics::{mape, rmse, trend_line, TrendLine};
use prgp_core::physics::{FundamentalDiagram, PhysicsModel};
use prgp_core::simulate::{self, Breakpoint, SensorConfig, SimConfig};
use prgp_core::trainer::{train, TrainOutcome, TrainedModel, TrainingData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::write_json;
use crate::error::{AppError, Result};

pub const REPORT_HEADER: &str =
    "model,dataset,flow_rmse,flow_mape,speed_rmse,speed_mape,slope_flow,intercept_flow,slope_speed,intercept_speed,seed";

/// Label of the calibrated-simulation baseline in reports.
pub const CALIBRATED_LABEL: &str = "calibrated-lwr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub n_test: usize,
    /// veh/5min
    pub flow_rmse: f64,
    /// percent
    pub flow_mape: f64,
    pub flow_mape_excluded: usize,
    /// mph
    pub speed_rmse: f64,
    pub speed_mape: f64,
    pub speed_mape_excluded: usize,
    pub slope_flow: f64,
    pub intercept_flow: f64,
    pub slope_speed: f64,
    pub intercept_speed: f64,
    pub config_hash: String,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.dataset,
            self.flow_rmse,
            self.flow_mape,
            self.speed_rmse,
            self.speed_mape,
            self.slope_flow,
            self.intercept_flow,
            self.slope_speed,
            self.intercept_speed,
            self.seed
        )
    }
}

pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Truth and prediction at every test row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub flow_truth: Vec<f64>,
    pub flow_pred: Vec<f64>,
    pub speed_truth: Vec<f64>,
    pub speed_pred: Vec<f64>,
}

impl Predictions {
    pub fn scatter_csv(truth: &[f64], pred: &[f64]) -> String {
        let mut out = String::from("truth,pred\n");
        for (y, f) in truth.iter().zip(pred) {
            let _ = writeln!(out, "{y},{f}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Predictions,
}

/// Labels shared by every report of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
}

pub fn score(label: &RunLabel, predictions: Predictions) -> Result<Evaluation> {
    let p = &predictions;
    let named = |what: &str, e: prgp_core::Error| match e {
        prgp_core::Error::UndefinedMetric(m) => AppError::UndefinedMetric(format!("{what}: {m}")),
        other => AppError::Numerical(other),
    };
    let flow_mape = mape(&p.flow_truth, &p.flow_pred).map_err(|e| named("flow MAPE", e))?;
    let speed_mape = mape(&p.speed_truth, &p.speed_pred).map_err(|e| named("speed MAPE", e))?;
    let flow_trend = trend_line(&p.flow_truth, &p.flow_pred).map_err(|e| named("flow trend", e))?;
    let speed_trend: TrendLine = trend_line(&p.speed_truth, &p.speed_pred).map_err(|e| named("speed trend", e))?;
    let report = MetricReport {
        model: label.model.clone(),
        dataset: label.dataset.clone(),
        seed: label.seed,
        n_test: p.flow_truth.len(),
        flow_rmse: rmse(&p.flow_truth, &p.flow_pred)?,
        flow_mape: flow_mape.value,
        flow_mape_excluded: flow_mape.excluded,
        speed_rmse: rmse(&p.speed_truth, &p.speed_pred)?,
        speed_mape: speed_mape.value,
        speed_mape_excluded: speed_mape.excluded,
        slope_flow: flow_trend.slope,
        intercept_flow: flow_trend.intercept,
        slope_speed: speed_trend.slope,
        intercept_speed: speed_trend.intercept,
        config_hash: label.config_hash.clone(),
    };
    Ok(Evaluation { report, predictions })
}

/// Physical `(x, t)` of the test rows.
pub fn test_locations(data: &Dataset) -> Matrix {
    let rows = data.test_indices();
    Matrix::from_fn(rows.len(), 2, |r, d| {
        let s = &data.samples[rows[r]];
        if d == 0 {
            s.x
        } else {
            s.t
        }
    })
}

/// Posterior-mean predictions of a trained model on the test rows.
pub fn predict_test(model: &TrainedModel, data: &Dataset) -> Result<Predictions> {
    let rows = data.test_indices();
    if rows.is_empty() {
        return Err(AppError::Config("dataset has no test rows".into()));
    }
    let est = model.estimate(&test_locations(data))?;
    Ok(Predictions {
        flow_truth: rows.iter().map(|&i| data.samples[i].flow).collect(),
        flow_pred: est.outputs[0].mean.clone(),
        speed_truth: rows.iter().map(|&i| data.samples[i].speed).collect(),
        speed_pred: est.outputs[1].mean.clone(),
    })
}

/// Splits, optionally corrupts, and standardizes a copy of `base`.
pub fn prepare(base: &Dataset, config: &RunConfig, noisy: bool, seed: u64) -> Result<Dataset> {
    let mut data = base.clone().split(config.split.train_fraction, seed)?;
    if noisy {
        let n = &config.noise;
        data = data.inject_noise(n.fraction, n.amplitude, n.distribution, seed)?;
    }
    Ok(data.standardize()?)
}

/// Trains one physics-regularized model (or the pure GP for
/// [`PhysicsModel::None`]) and evaluates it on the test rows.
pub fn run_model(
    data: &Dataset,
    config: &RunConfig,
    model: PhysicsModel,
    label: &RunLabel,
) -> Result<(TrainOutcome, Evaluation)> {
    let training = TrainingData::from_dataset(data)?;
    let init = config.initial_params(model)?;
    let outcome = train(&training, &init, &config.train_config(), &mut |_| {})?;
    if let Some(e) = &outcome.error {
        return Err(AppError::Numerical(e.clone()));
    }
    let trained = TrainedModel { models: outcome.models.clone(), standardization: training.standardization };
    let eval = score(label, predict_test(&trained, data)?)?;
    Ok((outcome, eval))
}

/// The unregularized GP baseline.
pub fn baseline_pure_gp(data: &Dataset, config: &RunConfig, label: &RunLabel) -> Result<Evaluation> {
    run_model(data, config, PhysicsModel::None, label).map(|(_, e)| e)
}

/// Search ranges for the Greenshields calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationGrid {
    /// mph: start, end, step
    pub free_flow_speed: (f64, f64, f64),
    /// veh/mile: start, end, step
    pub jam_density: (f64, f64, f64),
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self { free_flow_speed: (30.0, 100.0, 0.5), jam_density: (100.0, 400.0, 1.0) }
    }
}

fn grid_values((lo, hi, step): (f64, f64, f64)) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(move |k| lo + k as f64 * step)
}

/// Least-squares fit of `q = ρ·v_f·(1 − ρ/ρ_jam)` to `(ρ, q)` pairs (veh/mile,
/// veh/hour) by exhaustive grid search; the first minimum wins ties.
pub fn calibrate_fd(points: &[(f64, f64)], grid: &CalibrationGrid) -> Result<FundamentalDiagram> {
    if points.is_empty() {
        return Err(AppError::Config("no rows to calibrate the fundamental diagram".into()));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for vf in grid_values(grid.free_flow_speed) {
        for rj in grid_values(grid.jam_density) {
            let fd = FundamentalDiagram { free_flow_speed: vf, jam_density: rj };
            let sse: f64 = points.iter().map(|&(rho, q)| (q - fd.flow(rho)).powi(2)).sum();
            if best.map_or(true, |(_, _, b)| sse < b) {
                best = Some((vf, rj, sse));
            }
        }
    }
    let (vf, rj, _) = best.expect("grid is non-empty");
    Ok(FundamentalDiagram::greenshields(vf, rj)?)
}

/// Cell width of the baseline simulation, miles.
pub const BASELINE_DX: f64 = 0.05;

/// Calibrated physical baseline: fit a Greenshields diagram to the training
/// rows, then run the Godunov solver between the first and last stations.
/// The upstream station's training flows drive the inflow, the downstream
/// station's training densities set the receiving capacity at the exit, and
/// the earliest training reading at each station sets the initial density.
/// Test rows are predicted by noiseless virtual detectors at the station
/// positions.
pub fn baseline_calibrated_physical(data: &Dataset, label: &RunLabel) -> Result<Evaluation> {
    let train_rows = data.train_indices();
    let test_rows = data.test_indices();
    if test_rows.is_empty() {
        return Err(AppError::Config("dataset has no test rows".into()));
    }
    let points: Vec<(f64, f64)> =
        train_rows.iter().map(|&i| (data.samples[i].density, data.samples[i].flow * BINS_PER_HOUR)).collect();
    let fd = calibrate_fd(&points, &CalibrationGrid::default())?;

    let mut stations: BTreeMap<&str, f64> = BTreeMap::new();
    for s in &data.samples {
        stations.entry(s.station_id.as_str()).or_insert(s.x);
    }
    let mut order: Vec<(&str, f64)> = stations.into_iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let (upstream, x_up) = order[0];
    let x_last = order[order.len() - 1].1;
    let origin = x_up - BASELINE_DX / 2.0;
    let cells = ((x_last - origin) / BASELINE_DX).ceil() as usize + 1;

    let series = |id: &str, value: &dyn Fn(&prgp_core::data::TrafficSample) -> f64| {
        let mut points: Vec<Breakpoint> = train_rows
            .iter()
            .map(|&i| &data.samples[i])
            .filter(|s| s.station_id == id)
            .map(|s| Breakpoint { from: s.t, value: value(s) })
            .collect();
        points.sort_by(|a, b| a.from.total_cmp(&b.from));
        if let Some(first) = points.first_mut() {
            first.from = first.from.min(0.0);
        }
        points
    };
    let inflow = series(upstream, &|s| s.flow * BINS_PER_HOUR);
    // Supply of the observed downstream state: capacity while uncongested.
    let exit_supply = |s: &prgp_core::data::TrafficSample| {
        let rho = s.density.min(fd.jam_density);
        if rho <= fd.critical_density() {
            fd.capacity()
        } else {
            fd.flow(rho)
        }
    };
    let downstream_capacity = if order.len() > 1 { series(order[order.len() - 1].0, &exit_supply) } else { Vec::new() };

    let mut initial_density = Vec::with_capacity(order.len());
    for (k, &(id, x)) in order.iter().enumerate() {
        let earliest = train_rows
            .iter()
            .map(|&i| &data.samples[i])
            .filter(|s| s.station_id == id)
            .min_by(|a, b| a.t.total_cmp(&b.t));
        let rho = earliest.map_or(0.0, |s| s.density).clamp(0.0, fd.jam_density);
        let from = if k == 0 { 0.0 } else { (order[k - 1].1 + x) / 2.0 - origin };
        initial_density.push(Breakpoint { from, value: rho });
    }

    let period_hours = sampling_period(data);
    let t_end = data.samples.iter().map(|s| s.t).fold(0.0, f64::max) + period_hours;
    let dt = 0.8 * BASELINE_DX / fd.free_flow_speed;
    let sim = SimConfig {
        length: cells as f64 * BASELINE_DX,
        horizon: (t_end / dt).ceil() * dt,
        dx: BASELINE_DX,
        dt,
        fd,
        initial_density,
        inflow,
        downstream_capacity,
        save_every: 1,
    };
    let grid = simulate::run(&sim)?;
    let epoch = data.samples.iter().map(|s| s.timestamp).min().unwrap_or(0);
    let sensors = SensorConfig {
        positions: order.iter().map(|&(_, x)| x - origin).collect(),
        period_minutes: period_hours * 60.0,
        speed_noise: 0.0,
        flow_noise: 0.0,
        epoch,
        seed: 0,
    };
    let readings = simulate::virtual_sensors(&grid, &sensors)?;
    // Virtual stations are numbered in upstream-to-downstream order.
    let index_of: BTreeMap<&str, String> =
        order.iter().enumerate().map(|(k, &(id, _))| (id, format!("S{:02}", k + 1))).collect();
    let lookup: BTreeMap<(&str, i64), (f64, f64)> =
        readings.iter().map(|r| ((r.station_id.as_str(), r.timestamp), (r.flow, r.speed))).collect();

    let mut p = Predictions::default();
    for &i in &test_rows {
        let s = &data.samples[i];
        let key = (index_of[s.station_id.as_str()].as_str(), s.timestamp);
        let (flow, speed) = lookup.get(&key).copied().ok_or_else(|| {
            AppError::Config(format!("no simulated reading for station {} at {}", s.station_id, s.timestamp))
        })?;
        p.flow_truth.push(s.flow);
        p.flow_pred.push(flow * 5.0 / (period_hours * 60.0));
        p.speed_truth.push(s.speed);
        p.speed_pred.push(speed);
    }
    score(label, p)
}

/// Smallest positive gap between distinct timestamps, hours (5 minutes when
/// every row shares a timestamp).
fn sampling_period(data: &Dataset) -> f64 {
    let mut stamps: Vec<i64> = data.samples.iter().map(|s| s.timestamp).collect();
    stamps.sort_unstable();
    stamps.dedup();
    let gap = stamps.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(300);
    gap as f64 / 3600.0
}

pub fn dataset_label(noisy: bool) -> &'static str {
    if noisy {
        "noisy"
    } else {
        "clean"
    }
}

/// One matrix cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Prgp(PhysicsModel),
    Calibrated,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Prgp(m) => m.name(),
            Method::Calibrated => CALIBRATED_LABEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub noisy: bool,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_{}_seed{}", self.method.label(), dataset_label(self.noisy), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatrixBundle {
    pub evaluations: Vec<(Cell, Evaluation)>,
    pub failures: Vec<(Cell, String)>,
}

impl MatrixBundle {
    pub fn reports(&self) -> Vec<MetricReport> {
        self.evaluations.iter().map(|(_, e)| e.report.clone()).collect()
    }

    pub fn find(&self, method: Method, noisy: bool, seed: u64) -> Option<&MetricReport> {
        self.evaluations
            .iter()
            .find(|(c, _)| c.method == method && c.noisy == noisy && c.seed == seed)
            .map(|(_, e)| &e.report)
    }
}

pub fn matrix_cells(config: &RunConfig) -> Vec<Cell> {
    let m = &config.matrix;
    let datasets = [false, true].into_iter().filter(|&noisy| if noisy { m.noisy } else { m.clean });
    let mut methods: Vec<Method> = m.models.iter().map(|&p| Method::Prgp(p)).collect();
    if m.calibrated_baseline {
        methods.push(Method::Calibrated);
    }
    let mut cells = Vec::new();
    for noisy in datasets {
        for &method in &methods {
            for &seed in &m.seeds {
                cells.push(Cell { method, noisy, seed });
            }
        }
    }
    cells
}

/// Runs every configured cell. A failing cell is recorded and the rest
/// continue. `progress` is called once per finished cell, possibly from
/// several threads.
pub fn experiment_matrix(base: &Dataset, config: &RunConfig, progress: &(dyn Fn(&Cell, &Result<Evaluation>) + Sync)) -> Result<MatrixBundle> {
    let hash = config.hash()?;
    let cells = matrix_cells(config);
    let results: Vec<Result<Evaluation>> = cells
        .par_iter()
        .map(|cell| {
            let label = RunLabel {
                model: cell.method.label().to_string(),
                dataset: dataset_label(cell.noisy).to_string(),
                seed: cell.seed,
                config_hash: hash.clone(),
            };
            let result = prepare(base, config, cell.noisy, cell.seed).and_then(|data| match cell.method {
                Method::Prgp(model) => run_model(&data, config, model, &label).map(|(_, e)| e),
                Method::Calibrated => baseline_calibrated_physical(&data, &label),
            });
            progress(cell, &result);
            result
        })
        .collect();
    let mut bundle = MatrixBundle::default();
    for (cell, result) in cells.into_iter().zip(results) {
        match result {
            Ok(e) => bundle.evaluations.push((cell, e)),
            Err(e) => bundle.failures.push((cell, e.to_string())),
        }
    }
    Ok(bundle)
}

/// Writes `report.csv`, `reports.json`, `failures.txt` and per-cell scatter
/// CSVs under `scatter/`.
pub fn write_bundle(dir: &Path, bundle: &MatrixBundle) -> Result<()> {
    let path = dir.join("report.csv");
    fs::write(&path, report_csv(&bundle.reports())).map_err(AppError::io(&path))?;
    write_json(&dir.join("reports.json"), &bundle.reports())?;
    let mut failures = String::new();
    for (cell, message) in &bundle.failures {
        let _ = writeln!(failures, "{}: {}", cell.name(), message);
    }
    let path = dir.join("failures.txt");
    fs::write(&path, failures).map_err(AppError::io(&path))?;
    let scatter = dir.join("scatter");
    fs::create_dir_all(&scatter).map_err(AppError::io(&scatter))?;
    for (cell, e) in &bundle.evaluations {
        write_scatter(&scatter, &cell.name(), &e.predictions)?;
    }
    Ok(())
}

/// `<stem>_flow.csv` and `<stem>_speed.csv` with `truth,pred` columns.
pub fn write_scatter(dir: &Path, stem: &str, p: &Predictions) -> Result<()> {
    for (what, truth, pred) in [("flow", &p.flow_truth, &p.flow_pred), ("speed", &p.speed_truth, &p.speed_pred)] {
        let path = dir.join(format!("{stem}_{what}.csv"));
        fs::write(&path, Predictions::scatter_csv(truth, pred)).map_err(AppError::io(&path))?;
    }
    Ok(())
}
