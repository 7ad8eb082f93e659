use prgp_core::physics::FundamentalDiagram;
use prgp_core::simulate::{godunov_step, run, virtual_sensors, Breakpoint, SensorConfig, SimConfig};
use prgp_core::Error;

const FD: FundamentalDiagram = FundamentalDiagram { free_flow_speed: 60.0, jam_density: 200.0 };
const RHO_L: f64 = 20.0;
const RHO_R: f64 = 150.0;
const X0: f64 = 1.0;

fn greenshields_flow(rho: f64) -> f64 {
    rho * 60.0 * (1.0 - rho / 200.0)
}

/// Riemann problem whose right state is held by a matching exit capacity.
fn riemann(dx: f64, horizon: f64) -> SimConfig {
    let bp = |from, value| Breakpoint { from, value };
    SimConfig {
        length: 4.0,
        horizon,
        dx,
        dt: 0.9 * dx / FD.free_flow_speed,
        fd: FD,
        initial_density: vec![bp(0.0, RHO_L), bp(X0, RHO_R)],
        inflow: vec![bp(0.0, greenshields_flow(RHO_L))],
        downstream_capacity: vec![bp(0.0, greenshields_flow(RHO_R))],
        save_every: 1,
    }
}

/// Position where the profile first crosses the mid density, interpolated.
fn front(x: &[f64], rho: &[f64]) -> f64 {
    let mid = 0.5 * (RHO_L + RHO_R);
    let i = rho.iter().position(|&r| r >= mid).expect("front inside domain");
    let (r0, r1) = (rho[i - 1], rho[i]);
    x[i - 1] + (x[i] - x[i - 1]) * (mid - r0) / (r1 - r0)
}

fn rankine_hugoniot() -> f64 {
    (greenshields_flow(RHO_R) - greenshields_flow(RHO_L)) / (RHO_R - RHO_L)
}

#[test]
fn shock_speed_matches_rankine_hugoniot() {
    let s = rankine_hugoniot();
    assert!((s - 9.0).abs() < 1e-12);
    let grid = run(&riemann(0.01, 0.25)).unwrap();
    let at = |t: f64| grid.t.iter().position(|&tn| tn >= t - 1e-12).unwrap();
    let (n1, n2) = (at(0.05), at(0.25));
    let speed = (front(&grid.x, &grid.density[n2]) - front(&grid.x, &grid.density[n1])) / (grid.t[n2] - grid.t[n1]);
    assert!((speed - s).abs() / s < 0.02, "speed {speed}");
}

#[test]
fn mass_is_conserved_each_step() {
    let grid = run(&riemann(0.01, 0.25)).unwrap();
    let a = grid.audit;
    assert!(a.max_step_error / a.initial_mass < 1e-9);
    assert!(a.relative_error() < 1e-9);
}

#[test]
fn l1_error_shrinks_under_refinement() {
    let horizon = 0.2;
    let errors: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&dx| {
            let grid = run(&riemann(dx, horizon)).unwrap();
            let last = grid.density.len() - 1;
            let shock = X0 + rankine_hugoniot() * grid.t[last];
            grid.x
                .iter()
                .zip(&grid.density[last])
                .map(|(&x, &r)| dx * (r - if x < shock { RHO_L } else { RHO_R }).abs())
                .sum()
        })
        .collect();
    assert!(errors[1] < errors[0] && errors[2] < errors[1], "{errors:?}");
}

#[test]
fn equilibrium_is_a_steady_state() {
    let rho = 35.0;
    let bp = |from, value| Breakpoint { from, value };
    let config = SimConfig {
        initial_density: vec![bp(0.0, rho)],
        inflow: vec![bp(0.0, greenshields_flow(rho))],
        downstream_capacity: Vec::new(),
        horizon: 0.5,
        ..SimConfig::corridor()
    };
    let grid = run(&config).unwrap();
    for row in &grid.density {
        for &r in row {
            assert!((r - rho).abs() < 1e-9);
        }
    }
    let sensors = SensorConfig { speed_noise: 0.0, flow_noise: 0.0, ..SensorConfig::default() };
    for o in virtual_sensors(&grid, &sensors).unwrap() {
        assert!((o.flow * 12.0 - greenshields_flow(rho)).abs() < 1e-6);
        assert!((o.speed - FD.speed(rho)).abs() < 1e-9);
    }
}

#[test]
fn interface_flux_is_min_of_demand_and_supply() {
    // Free-flow cell into a congested one: receiving supply limits the flux.
    let rho = [50.0, 180.0, 180.0];
    let dt_over_dx = 0.01;
    let (next, _) = godunov_step(&rho, &FD, dt_over_dx, 0.0, f64::INFINITY);
    let flux01 = greenshields_flow(50.0).min(greenshields_flow(180.0));
    assert!((next[0] - (50.0 - dt_over_dx * flux01)).abs() < 1e-12);
}

#[test]
fn cfl_violation_is_rejected() {
    let mut c = SimConfig::corridor();
    c.dt = 2.0 * c.dx / c.fd.free_flow_speed;
    assert!(matches!(run(&c), Err(Error::CflViolation { .. })));
}
