//! Godunov finite-volume solver for the LWR conservation law with a
//! Greenshields flux, plus virtual loop detectors that sample the solution.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Observation, BINS_PER_HOUR};
use crate::error::{Error, Result};
use crate::math;
use crate::physics::FundamentalDiagram;
use crate::rng::{rng_for, stream};

/// Piecewise-constant profile: `value` holds from `from` until the next
/// breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub from: f64,
    pub value: f64,
}

fn piecewise(profile: &[Breakpoint], at: f64, default: f64) -> f64 {
    profile.iter().take_while(|b| b.from <= at).last().map_or(default, |b| b.value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// miles
    pub length: f64,
    /// hours
    pub horizon: f64,
    /// Cell width, miles.
    pub dx: f64,
    /// Time step, hours.
    pub dt: f64,
    pub fd: FundamentalDiagram,
    /// Initial density (veh/mile) over position (miles).
    pub initial_density: Vec<Breakpoint>,
    /// Upstream demand (veh/hour) over time (hours).
    pub inflow: Vec<Breakpoint>,
    /// Optional downstream capacity cap (veh/hour) over time; absent means
    /// free outflow.
    pub downstream_capacity: Vec<Breakpoint>,
    /// Keep every n-th time step in the output grid.
    pub save_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::corridor()
    }
}

impl SimConfig {
    /// A 6-mile corridor over 2 hours with a morning-peak style inflow and a
    /// temporary downstream bottleneck, producing both free-flow and
    /// congested regimes.
    pub fn corridor() -> Self {
        let fd = FundamentalDiagram { free_flow_speed: 60.0, jam_density: 200.0 };
        let bp = |from, value| Breakpoint { from, value };
        Self {
            length: 6.0,
            horizon: 2.0,
            dx: 0.05,
            dt: 0.05 / 60.0,
            fd,
            initial_density: alloc::vec![bp(0.0, 20.0), bp(3.0, 35.0)],
            inflow: alloc::vec![bp(0.0, 1400.0), bp(0.4, 2300.0), bp(0.9, 2800.0), bp(1.3, 1800.0), bp(1.7, 1200.0)],
            downstream_capacity: alloc::vec![bp(0.0, 3000.0), bp(0.6, 1700.0), bp(1.2, 3000.0)],
            save_every: 1,
        }
    }

    pub fn cells(&self) -> usize {
        math::round(self.length / self.dx) as usize
    }

    pub fn steps(&self) -> usize {
        math::round(self.horizon / self.dt) as usize
    }

    pub fn courant(&self) -> f64 {
        self.dt * self.fd.free_flow_speed / self.dx
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.horizon > 0.0 && self.dx > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidConfig("length, horizon, dx and dt must be positive".into()));
        }
        FundamentalDiagram::greenshields(self.fd.free_flow_speed, self.fd.jam_density)?;
        if self.cells() < 2 || self.save_every == 0 {
            return Err(Error::InvalidConfig("need at least two cells and save_every >= 1".into()));
        }
        let courant = self.courant();
        if courant > 1.0 + 1e-12 {
            return Err(Error::CflViolation { courant });
        }
        let bad = |p: &[Breakpoint]| p.iter().any(|b| !(b.value >= 0.0) || !b.from.is_finite());
        if bad(&self.initial_density) || bad(&self.inflow) || bad(&self.downstream_capacity) {
            return Err(Error::InvalidConfig("profiles must be finite and non-negative".into()));
        }
        if self.initial_density.iter().any(|b| b.value > self.fd.jam_density) {
            return Err(Error::InvalidConfig(format!("initial density exceeds jam density {}", self.fd.jam_density)));
        }
        Ok(())
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }
}

fn demand(fd: &FundamentalDiagram, rho: f64) -> f64 {
    if rho <= fd.critical_density() {
        fd.flow(rho)
    } else {
        fd.capacity()
    }
}

fn supply(fd: &FundamentalDiagram, rho: f64) -> f64 {
    if rho <= fd.critical_density() {
        fd.capacity()
    } else {
        fd.flow(rho)
    }
}

/// Fluxes (veh/hour) through the upstream and downstream edges during a step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundaryFlux {
    pub inflow: f64,
    pub outflow: f64,
}

/// One Godunov update. `upstream_demand` is the requested inflow and
/// `downstream_supply` the outflow cap (`f64::INFINITY` for free outflow).
pub fn godunov_step(
    rho: &[f64],
    fd: &FundamentalDiagram,
    dt_over_dx: f64,
    upstream_demand: f64,
    downstream_supply: f64,
) -> (Vec<f64>, BoundaryFlux) {
    let n = rho.len();
    let mut flux = Vec::with_capacity(n + 1);
    flux.push(upstream_demand.min(fd.capacity()).min(supply(fd, rho[0])));
    for i in 1..n {
        flux.push(demand(fd, rho[i - 1]).min(supply(fd, rho[i])));
    }
    flux.push(demand(fd, rho[n - 1]).min(downstream_supply));
    let next = (0..n).map(|i| rho[i] - dt_over_dx * (flux[i + 1] - flux[i])).collect();
    (next, BoundaryFlux { inflow: flux[0], outflow: flux[n] })
}

/// Vehicle-count bookkeeping over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MassAudit {
    pub initial_mass: f64,
    pub final_mass: f64,
    pub net_boundary_inflow: f64,
    /// Largest per-step `|Δmass - (F_in - F_out)·dt|`, vehicles.
    pub max_step_error: f64,
}

impl MassAudit {
    pub fn relative_error(&self) -> f64 {
        let scale = self.initial_mass.abs().max(self.final_mass.abs()).max(1.0);
        (self.final_mass - self.initial_mass - self.net_boundary_inflow).abs() / scale
    }
}

/// Density on a uniform space-time grid; speed and flow follow from the FD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldGrid {
    /// Cell centres, miles.
    pub x: Vec<f64>,
    /// hours
    pub t: Vec<f64>,
    /// `density[n][i]`, veh/mile.
    pub density: Vec<Vec<f64>>,
    pub fd: FundamentalDiagram,
    pub audit: MassAudit,
}

impl FieldGrid {
    pub fn speed(&self, n: usize, i: usize) -> f64 {
        self.fd.speed(self.density[n][i])
    }

    /// veh/hour
    pub fn flow(&self, n: usize, i: usize) -> f64 {
        self.fd.flow(self.density[n][i])
    }

    /// Index of the cell containing `position`.
    pub fn cell_at(&self, position: f64) -> Option<usize> {
        let dx = self.x.get(1).map_or(1.0, |x1| x1 - self.x[0]);
        let length = dx * self.x.len() as f64;
        if !(0.0..=length).contains(&position) {
            return None;
        }
        Some(((position / dx) as usize).min(self.x.len() - 1))
    }
}

/// Integrates the configured scenario over the full horizon.
pub fn run(config: &SimConfig) -> Result<FieldGrid> {
    config.validate()?;
    let fd = config.fd;
    let (n_cells, n_steps) = (config.cells(), config.steps());
    let x: Vec<f64> = (0..n_cells).map(|i| config.cell_center(i)).collect();
    let mut rho: Vec<f64> = x.iter().map(|&xi| piecewise(&config.initial_density, xi, 0.0)).collect();
    let mass = |r: &[f64]| r.iter().sum::<f64>() * config.dx;

    let mut audit = MassAudit { initial_mass: mass(&rho), ..MassAudit::default() };
    let mut t = alloc::vec![0.0];
    let mut density = alloc::vec![rho.clone()];
    let ratio = config.dt / config.dx;
    for step in 0..n_steps {
        let now = step as f64 * config.dt;
        let up = piecewise(&config.inflow, now, 0.0);
        let down = piecewise(&config.downstream_capacity, now, f64::INFINITY);
        let before = mass(&rho);
        let (next, bf) = godunov_step(&rho, &fd, ratio, up, down);
        let exchanged = (bf.inflow - bf.outflow) * config.dt;
        audit.net_boundary_inflow += exchanged;
        audit.max_step_error = audit.max_step_error.max((mass(&next) - before - exchanged).abs());
        rho = next;
        if (step + 1) % config.save_every == 0 {
            t.push((step + 1) as f64 * config.dt);
            density.push(rho.clone());
        }
    }
    audit.final_mass = mass(&rho);
    Ok(FieldGrid { x, t, density, fd, audit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Detector mileposts.
    pub positions: Vec<f64>,
    /// Aggregation period, minutes.
    pub period_minutes: f64,
    /// Measurement noise std for speed, mph.
    pub speed_noise: f64,
    /// Measurement noise std for flow, veh/5min.
    pub flow_noise: f64,
    /// Timestamp of the grid's `t = 0`, seconds since the epoch.
    pub epoch: i64,
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            positions: alloc::vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5],
            period_minutes: 5.0,
            speed_noise: 1.0,
            flow_noise: 3.0,
            epoch: 1_567_296_000,
            seed: 0,
        }
    }
}

/// Period-averaged detector readings. Flow is reported in veh/5min and speed
/// as the space-mean `q̄/ρ̄` (free-flow speed on an empty road); Gaussian
/// noise is added, with flow clamped at zero and speed at 1 mph.
pub fn virtual_sensors(grid: &FieldGrid, sensors: &SensorConfig) -> Result<Vec<Observation>> {
    if !(sensors.period_minutes > 0.0) || sensors.speed_noise < 0.0 || sensors.flow_noise < 0.0 {
        return Err(Error::InvalidConfig("sensor period must be positive and noise non-negative".into()));
    }
    let cells = sensors
        .positions
        .iter()
        .map(|&p| grid.cell_at(p).ok_or_else(|| Error::InvalidConfig(format!("sensor at {p} lies outside the domain"))))
        .collect::<Result<Vec<_>>>()?;
    let period = sensors.period_minutes / 60.0;
    let horizon = grid.t.last().copied().unwrap_or(0.0);
    let periods = math::floor(horizon / period + 1e-9) as usize;
    let speed_noise = Normal::new(0.0, sensors.speed_noise).map_err(|_| Error::InvalidConfig("speed noise".into()))?;
    let flow_noise = Normal::new(0.0, sensors.flow_noise).map_err(|_| Error::InvalidConfig("flow noise".into()))?;
    let mut rng = rng_for(sensors.seed, stream::SENSORS, 0);
    let mut out = Vec::with_capacity(periods * cells.len());
    let bin_scale = BINS_PER_HOUR * sensors.period_minutes / 5.0;
    for p in 0..periods {
        let (lo, hi) = (p as f64 * period, (p + 1) as f64 * period);
        let snaps: Vec<usize> = (0..grid.t.len()).filter(|&n| grid.t[n] >= lo - 1e-12 && grid.t[n] < hi - 1e-12).collect();
        if snaps.is_empty() {
            continue;
        }
        for (k, &i) in cells.iter().enumerate() {
            let count = snaps.len() as f64;
            let rho = snaps.iter().map(|&n| grid.density[n][i]).sum::<f64>() / count;
            let q = snaps.iter().map(|&n| grid.flow(n, i)).sum::<f64>() / count;
            let speed = if rho > 1e-9 { q / rho } else { grid.fd.free_flow_speed };
            let flow = q / bin_scale;
            let dq = if sensors.flow_noise > 0.0 { flow_noise.sample(&mut rng) } else { 0.0 };
            let dv = if sensors.speed_noise > 0.0 { speed_noise.sample(&mut rng) } else { 0.0 };
            out.push(Observation {
                station_id: format!("S{:02}", k + 1),
                timestamp: sensors.epoch + math::round(lo * 3600.0) as i64,
                milepost: grid.x[i],
                flow: (flow + dq).max(0.0),
                speed: (speed + dv).max(1.0),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd() -> FundamentalDiagram {
        FundamentalDiagram { free_flow_speed: 60.0, jam_density: 200.0 }
    }

    fn base(initial: Vec<Breakpoint>, inflow: f64, horizon: f64, dx: f64) -> SimConfig {
        SimConfig {
            length: 4.0,
            horizon,
            dx,
            dt: 0.9 * dx / 60.0,
            fd: fd(),
            initial_density: initial,
            inflow: alloc::vec![Breakpoint { from: 0.0, value: inflow }],
            downstream_capacity: Vec::new(),
            save_every: 1,
        }
    }

    #[test]
    fn uniform_state_is_stationary() {
        let rho = alloc::vec![40.0; 10];
        let q = fd().flow(40.0);
        let (next, bf) = godunov_step(&rho, &fd(), 0.01, q, f64::INFINITY);
        assert_eq!(next, rho);
        assert_eq!(bf.inflow, bf.outflow);
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let mut c = base(Vec::new(), 0.0, 0.1, 0.05);
        c.dt = 2.0 * c.dx / 60.0;
        assert!(matches!(run(&c), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn empty_road_stays_empty() {
        let g = run(&base(Vec::new(), 0.0, 0.2, 0.05)).unwrap();
        assert!(g.density.iter().flatten().all(|&r| r == 0.0));
    }

    #[test]
    fn rarefaction_stays_within_initial_bounds() {
        let init = alloc::vec![Breakpoint { from: 0.0, value: 150.0 }, Breakpoint { from: 2.0, value: 20.0 }];
        let q = fd().flow(150.0);
        let g = run(&base(init, q, 0.02, 0.01)).unwrap();
        for row in &g.density {
            for &r in row {
                assert!((20.0 - 1e-9..=150.0 + 1e-9).contains(&r));
            }
        }
    }

    #[test]
    fn mass_is_conserved() {
        let g = run(&SimConfig::corridor()).unwrap();
        assert!(g.audit.max_step_error < 1e-9);
        assert!(g.audit.relative_error() < 1e-9);
    }

    #[test]
    fn zero_noise_sensors_report_period_averages() {
        let mut c = base(alloc::vec![Breakpoint { from: 0.0, value: 30.0 }], fd().flow(30.0), 0.25, 0.05);
        c.dt = 0.05 / 60.0;
        let g = run(&c).unwrap();
        let s = SensorConfig { positions: alloc::vec![1.0], speed_noise: 0.0, flow_noise: 0.0, ..SensorConfig::default() };
        let rows = virtual_sensors(&g, &s).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_relative_eq!(r.speed, fd().speed(30.0), max_relative = 1e-12);
            assert_relative_eq!(r.flow, fd().flow(30.0) / 12.0, max_relative = 1e-12);
        }
        assert_eq!(rows[1].timestamp - rows[0].timestamp, 300);
    }

    #[test]
    fn sensor_outside_domain_is_an_error() {
        let g = run(&base(Vec::new(), 0.0, 0.1, 0.05)).unwrap();
        let s = SensorConfig { positions: alloc::vec![9.0], ..SensorConfig::default() };
        assert!(virtual_sensors(&g, &s).is_err());
    }
}
