//! Sensor CSV ingestion, the canonical dataset format (CSV plus JSON sidecar)
//! and the field/residual diagnostic CSVs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use prgp_core::data::{Dataset, NoiseRecord, Observation, SplitRecord, Standardization};
use prgp_core::physics::ResidualBatch;
use prgp_core::simulate::FieldGrid;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const HEADER: [&str; 5] = ["station_id", "timestamp_utc", "milepost", "flow_veh_per_5min", "speed_mph"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(AppError::io(path))?))
}

/// Parsed readings plus the number of rows dropped for missing fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub rows: Vec<Observation>,
    pub dropped: usize,
}

/// Parses sensor CSV text. Rows with an empty or absent field are dropped and
/// counted; a field that is present but unparseable is an error naming the
/// line.
pub fn parse_observations(reader: impl Read, origin: &Path) -> Result<ParsedCsv> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let parse_err = |line: u64, message: String| AppError::Parse { path: origin.to_path_buf(), line, message };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().map(str::trim).ne(HEADER.iter().copied()) {
        return Err(parse_err(1, format!("expected header `{}`", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() > HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", HEADER.len(), record.len())));
        }
        let fields: Vec<&str> = record.iter().map(str::trim).collect();
        if fields.len() < HEADER.len() || fields.iter().any(|f| f.is_empty()) {
            dropped += 1;
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| parse_err(line, format!("invalid {} `{}`", HEADER[i], fields[i])))
        };
        let timestamp = fields[1]
            .parse::<i64>()
            .map_err(|_| parse_err(line, format!("invalid timestamp_utc `{}`", fields[1])))?;
        rows.push(Observation {
            station_id: fields[0].to_string(),
            timestamp,
            milepost: num(2)?,
            flow: num(3)?,
            speed: num(4)?,
        });
    }
    Ok(ParsedCsv { rows, dropped })
}

/// Loads a sensor CSV into a cleaned dataset tagged with the file's SHA-256.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(AppError::io(path))?;
    let parsed = parse_observations(bytes.as_slice(), path)?;
    if parsed.rows.is_empty() && parsed.dropped == 0 {
        return Err(AppError::Parse { path: path.to_path_buf(), line: 1, message: "no data rows".into() });
    }
    let mut data = Dataset::from_observations_with_drops(parsed.rows, parsed.dropped).map_err(|e| AppError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    data.source_hash = Some(sha256_hex(&bytes));
    Ok(data)
}

/// CSV text in the sensor schema. Floats use the shortest representation
/// that parses back to the same value.
pub fn observations_csv(rows: &[Observation]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| AppError::Config(e.to_string());
    w.write_record(HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.station_id.clone(),
            r.timestamp.to_string(),
            r.milepost.to_string(),
            r.flow.to_string(),
            r.speed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| AppError::Config(e.to_string()))
}

pub fn write_observations(path: &Path, rows: &[Observation]) -> Result<()> {
    fs::write(path, observations_csv(rows)?).map_err(AppError::io(path))
}

/// Everything about a dataset that the CSV itself does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub source_hash: Option<String>,
    pub dropped_rows: usize,
    pub standardization: Option<Standardization>,
    pub split: Option<SplitRecord>,
    pub noise: Option<NoiseRecord>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `<path>` (rows) and `<path>.json` (sidecar).
pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let rows: Vec<Observation> = data.samples.iter().map(|s| s.observation()).collect();
    write_observations(path, &rows)?;
    let sidecar = DatasetSidecar {
        source_hash: data.source_hash.clone(),
        dropped_rows: data.dropped_rows,
        standardization: data.standardization,
        split: data.split.clone(),
        noise: data.noise.clone(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// Loads a dataset, restoring split/noise/standardization from the sidecar
/// when one exists next to the CSV.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut data = load_csv(path)?;
    let side = sidecar_path(path);
    if side.exists() {
        let meta: DatasetSidecar = read_json(&side)?;
        if let Some(split) = &meta.split {
            if split.roles.len() != data.len() {
                return Err(AppError::Config(format!("{}: split covers {} rows, CSV has {}", side.display(), split.roles.len(), data.len())));
            }
        }
        data.source_hash = meta.source_hash.or(data.source_hash);
        data.dropped_rows = meta.dropped_rows;
        data.standardization = meta.standardization;
        data.split = meta.split;
        data.noise = meta.noise;
    }
    Ok(data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(AppError::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(AppError::io(path))?;
    serde_json::from_str(&text).map_err(|e| AppError::Parse { path: path.to_path_buf(), line: e.line() as u64, message: e.to_string() })
}

/// `t,x,rho,v,q` for every stored time level (every `stride`-th).
pub fn write_field_csv(path: &Path, grid: &FieldGrid, stride: usize) -> Result<()> {
    let mut out = String::from("t,x,rho,v,q\n");
    for n in (0..grid.t.len()).step_by(stride.max(1)) {
        for i in 0..grid.x.len() {
            let rho = grid.density[n][i];
            out.push_str(&format!("{},{},{},{},{}\n", grid.t[n], grid.x[i], rho, grid.speed(n, i), grid.flow(n, i)));
        }
    }
    fs::write(path, out).map_err(AppError::io(path))
}

/// `z_x,z_t,g_0,...` residual diagnostics.
pub fn write_residuals_csv(path: &Path, batch: &ResidualBatch) -> Result<()> {
    let mut out = String::from("z_x,z_t");
    for c in 0..batch.residuals.len() {
        out.push_str(&format!(",g_{c}"));
    }
    out.push('\n');
    for j in 0..batch.locations.rows() {
        out.push_str(&format!("{},{}", batch.locations[(j, 0)], batch.locations[(j, 1)]));
        for g in &batch.residuals {
            out.push_str(&format!(",{}", g[j]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(AppError::io(path))
}
