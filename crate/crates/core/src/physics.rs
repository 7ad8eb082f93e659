//! Traffic-flow differential-operator residuals evaluated on sampled fields.
//!
//! Residuals are written once, generically over [`Real`], so that the same
//! code produces plain values (`f64`) and forward-mode partial derivatives
//! ([`Dual`]) for the ELBO gradient.
//!
//! Units: density veh/mile, speed mph, flow veh/hour, space miles, time hours.

use alloc::vec::Vec;
use core::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelFamily, KernelParams};
use crate::linalg::{Cholesky, Matrix};

/// Floor applied to density before it enters the fundamental diagram and the
/// PW anticipation term `c₀²/ρ`.
pub const DENSITY_FLOOR: f64 = 1.0;
/// Upper density clamp as a multiple of the jam density.
pub const DENSITY_CEILING_FACTOR: f64 = 1.5;

/// Greenshields fundamental diagram `V(ρ) = v_f (1 - ρ/ρ_jam)`, clamped at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    /// mph
    pub free_flow_speed: f64,
    /// veh/mile
    pub jam_density: f64,
}

impl FundamentalDiagram {
    pub fn greenshields(free_flow_speed: f64, jam_density: f64) -> Result<Self> {
        if !(free_flow_speed > 0.0 && jam_density > 0.0) {
            return Err(Error::InvalidConfig("fundamental diagram parameters must be positive".into()));
        }
        Ok(Self { free_flow_speed, jam_density })
    }

    pub fn speed(&self, density: f64) -> f64 {
        fd_speed(self.free_flow_speed, self.jam_density, density)
    }

    /// `q(ρ) = ρ V(ρ)` in veh/hour.
    pub fn flow(&self, density: f64) -> f64 {
        density * self.speed(density)
    }

    pub fn critical_density(&self) -> f64 {
        0.5 * self.jam_density
    }

    /// Maximum of `q(ρ)`, veh/hour.
    pub fn capacity(&self) -> f64 {
        0.25 * self.free_flow_speed * self.jam_density
    }

    /// `q'(ρ) = v_f (1 - 2ρ/ρ_jam)` on `[0, ρ_jam]`.
    pub fn wave_speed(&self, density: f64) -> f64 {
        self.free_flow_speed * (1.0 - 2.0 * density / self.jam_density)
    }

    /// Inverse of the free-flow branch of `q(ρ)`; `None` above capacity.
    pub fn free_flow_density(&self, flow: f64) -> Option<f64> {
        let (vf, rj) = (self.free_flow_speed, self.jam_density);
        let disc = 1.0 - 4.0 * flow / (vf * rj);
        if disc < 0.0 {
            return None;
        }
        Some(0.5 * rj * (1.0 - crate::math::sqrt(disc)))
    }
}

/// Greenshields speed for plain floats.
pub fn fd_speed(free_flow_speed: f64, jam_density: f64, density: f64) -> f64 {
    (free_flow_speed * (1.0 - density / jam_density)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsModel {
    None,
    Lwr,
    Pw,
    Arz,
    Heat,
}

impl PhysicsModel {
    pub const ALL: [PhysicsModel; 5] =
        [PhysicsModel::None, PhysicsModel::Lwr, PhysicsModel::Pw, PhysicsModel::Arz, PhysicsModel::Heat];

    /// Number of residual equations, one shadow GP each.
    pub fn equation_count(self) -> usize {
        match self {
            PhysicsModel::None => 0,
            PhysicsModel::Lwr | PhysicsModel::Heat => 1,
            PhysicsModel::Pw | PhysicsModel::Arz => 2,
        }
    }

    /// Residual channels and the equation each one belongs to. The heat
    /// control applies its single equation to flow, speed and density.
    pub fn channels(self) -> &'static [usize] {
        match self {
            PhysicsModel::None => &[],
            PhysicsModel::Lwr => &[0],
            PhysicsModel::Pw | PhysicsModel::Arz => &[0, 1],
            PhysicsModel::Heat => &[0, 0, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhysicsModel::None => "none",
            PhysicsModel::Lwr => "lwr",
            PhysicsModel::Pw => "pw",
            PhysicsModel::Arz => "arz",
            PhysicsModel::Heat => "heat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Physical parameters that enter this model's residuals.
    pub fn physical_params(self) -> &'static [PhysicalParam] {
        use PhysicalParam::*;
        match self {
            PhysicsModel::None | PhysicsModel::Lwr => &[],
            PhysicsModel::Pw => &[FreeFlowSpeed, JamDensity, RelaxationTime, Anticipation],
            PhysicsModel::Arz => &[FreeFlowSpeed, JamDensity, RelaxationTime],
            PhysicsModel::Heat => &[Diffusivity],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhysicalParam {
    FreeFlowSpeed,
    JamDensity,
    RelaxationTime,
    Anticipation,
    Diffusivity,
}

impl PhysicalParam {
    pub const ALL: [PhysicalParam; 5] = [
        PhysicalParam::FreeFlowSpeed,
        PhysicalParam::JamDensity,
        PhysicalParam::RelaxationTime,
        PhysicalParam::Anticipation,
        PhysicalParam::Diffusivity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Physics prior configuration: which residuals, their physical parameters,
/// per-equation strengths `γ_w` and shadow kernels `K̂_w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsSpec {
    pub model: PhysicsModel,
    pub fd: FundamentalDiagram,
    /// `τ₀`, hours.
    pub relaxation_time: f64,
    /// `c₀²`, mph².
    pub anticipation: f64,
    /// `β₁`, mile²/hour.
    pub diffusivity: f64,
    pub gammas: Vec<f64>,
    pub shadow: Vec<KernelParams>,
}

impl PhysicsSpec {
    /// Default physical parameters (`v_f = 65`, `ρ_jam = 200`, `τ₀ = 30 s`,
    /// `c₀² = 100`, `β₁ = 1`) with unit-amplitude shadow kernels. A single
    /// `γ` is broadcast to every equation.
    pub fn new(model: PhysicsModel, gammas: &[f64], shadow_family: KernelFamily) -> Result<Self> {
        let w = model.equation_count();
        let gammas: Vec<f64> = match gammas.len() {
            0 => alloc::vec![1.0; w],
            1 => alloc::vec![gammas[0]; w],
            n if n == w => gammas.to_vec(),
            n => {
                return Err(Error::InvalidConfig(alloc::format!(
                    "model {} has {w} equations but {n} gamma values were given",
                    model.name()
                )))
            }
        };
        let mut shadow = Vec::with_capacity(w);
        for _ in 0..w {
            let mut k = KernelParams::initial(shadow_family, 2, 1.0)?;
            k.log_noise_precision = crate::math::ln(SHADOW_NUGGET_PRECISION);
            shadow.push(k);
        }
        let spec = Self {
            model,
            fd: FundamentalDiagram::greenshields(65.0, 200.0)?,
            relaxation_time: 30.0 / 3600.0,
            anticipation: 100.0,
            diffusivity: 1.0,
            gammas,
            shadow,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self::new(PhysicsModel::None, &[], KernelFamily::SeArd).expect("valid default")
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.model.equation_count();
        if self.gammas.len() != w || self.shadow.len() != w {
            return Err(Error::InvalidConfig("gamma/shadow count does not match the model".into()));
        }
        if self.gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be finite and non-negative".into()));
        }
        for v in [self.relaxation_time, self.anticipation, self.diffusivity] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig("physical parameters must be positive".into()));
            }
        }
        for k in &self.shadow {
            k.validate()?;
        }
        FundamentalDiagram::greenshields(self.fd.free_flow_speed, self.fd.jam_density).map(|_| ())
    }

    /// True when the regularizer contributes to the objective.
    pub fn is_active(&self) -> bool {
        self.model != PhysicsModel::None && self.gammas.iter().any(|g| *g > 0.0)
    }

    pub fn param(&self, p: PhysicalParam) -> f64 {
        match p {
            PhysicalParam::FreeFlowSpeed => self.fd.free_flow_speed,
            PhysicalParam::JamDensity => self.fd.jam_density,
            PhysicalParam::RelaxationTime => self.relaxation_time,
            PhysicalParam::Anticipation => self.anticipation,
            PhysicalParam::Diffusivity => self.diffusivity,
        }
    }

    pub fn set_param(&mut self, p: PhysicalParam, value: f64) {
        match p {
            PhysicalParam::FreeFlowSpeed => self.fd.free_flow_speed = value,
            PhysicalParam::JamDensity => self.fd.jam_density = value,
            PhysicalParam::RelaxationTime => self.relaxation_time = value,
            PhysicalParam::Anticipation => self.anticipation = value,
            PhysicalParam::Diffusivity => self.diffusivity = value,
        }
    }

    pub fn physical_params<R: Real>(&self) -> PhysicalParams<R> {
        PhysicalParams {
            free_flow_speed: R::constant(self.fd.free_flow_speed),
            jam_density: R::constant(self.fd.jam_density),
            relaxation_time: R::constant(self.relaxation_time),
            anticipation: R::constant(self.anticipation),
            diffusivity: R::constant(self.diffusivity),
        }
    }
}

/// Shadow covariances carry a fixed nugget `1/τ̂` with this precision, relative
/// to a unit-amplitude kernel.
pub const SHADOW_NUGGET_PRECISION: f64 = 1e6;

/// Scalar type the residuals are generic over.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;

    fn scale(self, k: f64) -> Self {
        self * Self::constant(k)
    }
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }

    #[inline]
    fn value(&self) -> f64 {
        *self
    }
}

/// Forward-mode dual number with `N` tangent directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    /// Independent variable seeded along direction `slot` with tangent `seed`.
    pub fn variable(v: f64, slot: usize, seed: f64) -> Self {
        let mut d = [0.0; N];
        d[slot] = seed;
        Self { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for (a, b) in self.d.iter_mut().zip(o.d) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for (i, x) in d.iter_mut().enumerate() {
            *x = (self.d[i] - v * o.d[i]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.v = -self.v;
        self.d.iter_mut().for_each(|x| *x = -*x);
        self
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    #[inline]
    fn value(&self) -> f64 {
        self.v
    }
}

/// A scalar field with its space/time derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldJet<R> {
    pub value: R,
    pub dx: R,
    pub dt: R,
    pub dxx: R,
}

impl<R: Real> FieldJet<R> {
    pub fn constant(v: f64) -> Self {
        let z = R::constant(0.0);
        Self { value: R::constant(v), dx: z, dt: z, dxx: z }
    }
}

/// Density (veh/mile), speed (mph) and flow (veh/hour) jets at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficJet<R> {
    pub density: FieldJet<R>,
    pub speed: FieldJet<R>,
    pub flow: FieldJet<R>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalParams<R> {
    pub free_flow_speed: R,
    pub jam_density: R,
    pub relaxation_time: R,
    pub anticipation: R,
    pub diffusivity: R,
}

/// Density clamped to `[DENSITY_FLOOR, 1.5 ρ_jam]` and whether it was inside
/// the range (the clamp has zero derivative outside).
fn clamp_density<R: Real>(rho: R, jam: R) -> (R, bool) {
    let hi = DENSITY_CEILING_FACTOR * jam.value();
    let r = rho.value();
    if r < DENSITY_FLOOR {
        (R::constant(DENSITY_FLOOR), false)
    } else if r > hi {
        (jam.scale(DENSITY_CEILING_FACTOR), false)
    } else {
        (rho, true)
    }
}

/// Greenshields `V(ρ)` and `V'(ρ)` on the clamped density; both vanish past jam.
fn fd_speed_and_slope<R: Real>(rho_c: R, p: &PhysicalParams<R>) -> (R, R) {
    if rho_c.value() >= p.jam_density.value() {
        return (R::constant(0.0), R::constant(0.0));
    }
    let v = p.free_flow_speed * (R::constant(1.0) - rho_c / p.jam_density);
    let dv = -(p.free_flow_speed / p.jam_density);
    (v, dv)
}

/// `∂_t ρ + ∂_x q`.
pub fn lwr_residual<R: Real>(jet: &TrafficJet<R>) -> R {
    jet.density.dt + jet.flow.dx
}

/// Conservation in the `ρ v` form: `∂_t ρ + ∂_x(ρ v)`.
fn conservation_rho_v<R: Real>(jet: &TrafficJet<R>) -> R {
    let (r, v) = (&jet.density, &jet.speed);
    r.dt + r.dx * v.value + r.value * v.dx
}

/// PW: `[∂_t ρ + ∂_x(ρv), ∂_t v + v ∂_x v + (v - V(ρ))/τ₀ + (c₀²/ρ) ∂_x ρ]`.
pub fn pw_residuals<R: Real>(jet: &TrafficJet<R>, p: &PhysicalParams<R>) -> [R; 2] {
    let (r, v) = (&jet.density, &jet.speed);
    let (rho_c, _) = clamp_density(r.value, p.jam_density);
    let (v_eq, _) = fd_speed_and_slope(rho_c, p);
    let momentum =
        v.dt + v.value * v.dx + (v.value - v_eq) / p.relaxation_time + p.anticipation / rho_c * r.dx;
    [conservation_rho_v(jet), momentum]
}

/// ARZ: `[∂_t ρ + ∂_x(ρv), ∂_t(v - V(ρ)) + v ∂_x(v - V(ρ)) + (v - V(ρ))/τ₀]`.
pub fn arz_residuals<R: Real>(jet: &TrafficJet<R>, p: &PhysicalParams<R>) -> [R; 2] {
    let (r, v) = (&jet.density, &jet.speed);
    let (rho_c, inside) = clamp_density(r.value, p.jam_density);
    let (v_eq, slope) = fd_speed_and_slope(rho_c, p);
    let slope = if inside { slope } else { R::constant(0.0) };
    let gap = v.value - v_eq;
    let gap_t = v.dt - slope * r.dt;
    let gap_x = v.dx - slope * r.dx;
    [conservation_rho_v(jet), gap_t + v.value * gap_x + gap / p.relaxation_time]
}

/// Heat control `∂_t f - β₁ ∂_xx f` applied to density, speed and flow.
pub fn heat_residuals<R: Real>(jet: &TrafficJet<R>, p: &PhysicalParams<R>) -> [R; 3] {
    let h = |f: &FieldJet<R>| f.dt - p.diffusivity * f.dxx;
    [h(&jet.flow), h(&jet.speed), h(&jet.density)]
}

/// Residual channels of `model` at one point, in [`PhysicsModel::channels`] order.
pub fn residuals<R: Real>(model: PhysicsModel, jet: &TrafficJet<R>, p: &PhysicalParams<R>) -> Vec<R> {
    match model {
        PhysicsModel::None => Vec::new(),
        PhysicsModel::Lwr => alloc::vec![lwr_residual(jet)],
        PhysicsModel::Pw => pw_residuals(jet, p).to_vec(),
        PhysicsModel::Arz => arz_residuals(jet, p).to_vec(),
        PhysicsModel::Heat => heat_residuals(jet, p).to_vec(),
    }
}

/// Residual vectors `g` at pseudo-points `Z`, one per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBatch {
    pub locations: Matrix,
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualBatch {
    /// Evaluates every channel of `spec.model` at each jet.
    pub fn evaluate(spec: &PhysicsSpec, locations: Matrix, jets: &[TrafficJet<f64>]) -> Result<Self> {
        if jets.len() != locations.rows() {
            return Err(Error::DimensionMismatch { expected: locations.rows(), found: jets.len() });
        }
        let p = spec.physical_params::<f64>();
        let channels = spec.model.channels().len();
        let mut out = alloc::vec![Vec::with_capacity(jets.len()); channels];
        for jet in jets {
            for (c, g) in residuals(spec.model, jet, &p).into_iter().enumerate() {
                out[c].push(g);
            }
        }
        Ok(Self { locations, residuals: out })
    }

    /// Mean absolute residual over all channels and points.
    pub fn mean_abs(&self) -> f64 {
        let n: usize = self.residuals.iter().map(Vec::len).sum();
        if n == 0 {
            return 0.0;
        }
        self.residuals.iter().flatten().map(|g| crate::math::abs(*g)).sum::<f64>() / n as f64
    }
}

/// `log N(g | 0, K̂)`: the shadow-GP density of residuals at zero
/// pseudo-observations.
pub fn shadow_gp_log_density(residuals: &[f64], covariance: &Matrix) -> Result<f64> {
    if covariance.rows() != residuals.len() || covariance.cols() != residuals.len() {
        return Err(Error::DimensionMismatch { expected: residuals.len(), found: covariance.rows() });
    }
    let chol = Cholesky::factor_with_jitter(covariance)?;
    Ok(chol.gaussian_log_density(residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(vf: f64, rj: f64, tau: f64, c0: f64, beta: f64) -> PhysicalParams<f64> {
        PhysicalParams { free_flow_speed: vf, jam_density: rj, relaxation_time: tau, anticipation: c0, diffusivity: beta }
    }

    fn uniform(rho: f64, v: f64) -> TrafficJet<f64> {
        TrafficJet { density: FieldJet::constant(rho), speed: FieldJet::constant(v), flow: FieldJet::constant(rho * v) }
    }

    #[test]
    fn fd_limits() {
        let fd = FundamentalDiagram::greenshields(60.0, 200.0).unwrap();
        assert_eq!(fd.speed(0.0), 60.0);
        assert_eq!(fd.speed(200.0), 0.0);
        assert_eq!(fd.speed(100.0), 30.0);
        assert_eq!(fd.speed(260.0), 0.0);
        assert_eq!(fd.flow(0.0), 0.0);
        assert_eq!(fd.flow(200.0), 0.0);
        assert_eq!(fd.capacity(), 3000.0);
        let rho = fd.free_flow_density(1080.0).unwrap();
        assert_relative_eq!(rho, 20.0, max_relative = 1e-12);
        assert!(fd.free_flow_density(3100.0).is_none());
    }

    #[test]
    fn lwr_constant_and_canceling_linear_fields() {
        assert_eq!(lwr_residual(&uniform(30.0, 50.0)), 0.0);
        // ρ = t, q = -x
        let mut jet = uniform(0.0, 50.0);
        jet.density.dt = 1.0;
        jet.flow.dx = -1.0;
        assert_eq!(lwr_residual(&jet), 0.0);
    }

    #[test]
    fn lwr_symbolic_field() {
        // ρ = sin x cos t, q = 0 → g = -sin x sin t
        for (x, t) in [(0.1, 0.2), (0.7, -0.3), (1.3, 0.9), (-0.4, 2.0), (2.2, 0.5)] {
            let mut jet = uniform(0.0, 50.0);
            jet.density.value = f64::sin(x) * f64::cos(t);
            jet.density.dt = -f64::sin(x) * f64::sin(t);
            jet.density.dx = f64::cos(x) * f64::cos(t);
            assert_relative_eq!(lwr_residual(&jet), -f64::sin(x) * f64::sin(t), max_relative = 1e-15);
        }
    }

    #[test]
    fn pw_equilibrium_and_relaxation() {
        let p = params(60.0, 200.0, 0.01, 100.0, 1.0);
        let rho = 40.0;
        let v_eq = fd_speed(60.0, 200.0, rho);
        let g = pw_residuals(&uniform(rho, v_eq), &p);
        assert_eq!(g, [0.0, 0.0]);
        let g = pw_residuals(&uniform(rho, v_eq + 3.0), &p);
        assert_relative_eq!(g[1], 3.0 / 0.01, max_relative = 1e-12);
    }

    #[test]
    fn pw_polynomial_fields() {
        // ρ = 30 + 2x + t², v = 50 - x t
        let p = params(65.0, 180.0, 0.02, 90.0, 1.0);
        for (x, t) in [(0.5, 0.1), (1.0, 1.0), (2.0, 0.3), (0.1, 1.7), (3.0, 2.0)] {
            let rho = 30.0 + 2.0 * x + t * t;
            let v = 50.0 - x * t;
            let jet = TrafficJet {
                density: FieldJet { value: rho, dx: 2.0, dt: 2.0 * t, dxx: 0.0 },
                speed: FieldJet { value: v, dx: -t, dt: -x, dxx: 0.0 },
                flow: FieldJet::constant(rho * v),
            };
            let g = pw_residuals(&jet, &p);
            let g1 = 2.0 * t + 2.0 * v + rho * (-t);
            let v_eq = 65.0 * (1.0 - rho / 180.0);
            let g2 = -x + v * (-t) + (v - v_eq) / 0.02 + 90.0 / rho * 2.0;
            assert_relative_eq!(g[0], g1, max_relative = 1e-12);
            assert_relative_eq!(g[1], g2, max_relative = 1e-12);
        }
    }

    #[test]
    fn arz_equilibrium_manifold() {
        let p = params(60.0, 200.0, 0.01, 100.0, 1.0);
        // v = V(ρ) pointwise with nonconstant ρ: v_x = V'ρ_x, v_t = V'ρ_t
        let slope = -60.0 / 200.0;
        let jet = TrafficJet {
            density: FieldJet { value: 50.0, dx: 3.0, dt: -7.0, dxx: 0.0 },
            speed: FieldJet { value: fd_speed(60.0, 200.0, 50.0), dx: slope * 3.0, dt: slope * -7.0, dxx: 0.0 },
            flow: FieldJet::constant(0.0),
        };
        assert!(arz_residuals(&jet, &p)[1].abs() < 1e-12);
        let g = arz_residuals(&uniform(50.0, 40.0), &p);
        assert_relative_eq!(g[1], (40.0 - 45.0) / 0.01, max_relative = 1e-12);
    }

    #[test]
    fn arz_polynomial_fields() {
        let p = params(62.0, 210.0, 0.015, 100.0, 1.0);
        for (x, t) in [(0.5, 0.1), (1.0, 1.0), (2.0, 0.3), (0.1, 1.7), (3.0, 2.0)] {
            let rho = 30.0 + 2.0 * x + t * t;
            let v = 50.0 - x * t;
            let jet = TrafficJet {
                density: FieldJet { value: rho, dx: 2.0, dt: 2.0 * t, dxx: 0.0 },
                speed: FieldJet { value: v, dx: -t, dt: -x, dxx: 0.0 },
                flow: FieldJet::constant(rho * v),
            };
            let g = arz_residuals(&jet, &p);
            let s = -62.0 / 210.0;
            let gap = v - 62.0 * (1.0 - rho / 210.0);
            let g2 = (-x - s * 2.0 * t) + v * (-t - s * 2.0) + gap / 0.015;
            assert_relative_eq!(g[1], g2, max_relative = 1e-12);
        }
    }

    #[test]
    fn heat_residuals_match_closed_forms() {
        let p = params(60.0, 200.0, 0.01, 100.0, 1.0);
        assert_eq!(heat_residuals(&uniform(20.0, 50.0), &p), [0.0; 3]);
        // f = x² on every field
        let f = FieldJet { value: 4.0, dx: 4.0, dt: 0.0, dxx: 2.0 };
        let jet = TrafficJet { density: f, speed: f, flow: f };
        assert_eq!(heat_residuals(&jet, &p), [-2.0; 3]);
        // Gaussian bump f = exp(-x²) e^{-t}, β = 0.5
        let p = params(60.0, 200.0, 0.01, 100.0, 0.5);
        let (x, t) = (0.7_f64, 0.2_f64);
        let e = (-x * x).exp() * (-t).exp();
        let bump = FieldJet { value: e, dx: -2.0 * x * e, dt: -e, dxx: (4.0 * x * x - 2.0) * e };
        let jet = TrafficJet { density: bump, speed: bump, flow: bump };
        let expect = -e - 0.5 * (4.0 * x * x - 2.0) * e;
        assert_relative_eq!(heat_residuals(&jet, &p)[0], expect, max_relative = 1e-14);
    }

    #[test]
    fn density_floor_keeps_pw_finite() {
        let p = params(60.0, 200.0, 0.01, 100.0, 1.0);
        let mut jet = uniform(-5.0, 60.0);
        jet.density.dx = 1.0;
        let g = pw_residuals(&jet, &p);
        assert!(g.iter().all(|v| v.is_finite()));
        assert_relative_eq!(g[1], (60.0 - fd_speed(60.0, 200.0, 1.0)) / 0.01 + 100.0, max_relative = 1e-12);
    }

    #[test]
    fn dual_matches_hand_derivative() {
        // d/dρ of PW momentum at fixed others: -V'(ρ)/τ₀ - c₀² ρ_x / ρ²
        let p = params(60.0, 200.0, 0.01, 100.0, 1.0);
        let pd = PhysicalParams {
            free_flow_speed: Dual::<1>::constant(60.0),
            jam_density: Dual::constant(200.0),
            relaxation_time: Dual::constant(0.01),
            anticipation: Dual::constant(100.0),
            diffusivity: Dual::constant(1.0),
        };
        let _ = p;
        let c = |v: f64| FieldJet { value: Dual::constant(v), dx: Dual::constant(0.0), dt: Dual::constant(0.0), dxx: Dual::constant(0.0) };
        let mut jet = TrafficJet { density: c(40.0), speed: c(50.0), flow: c(0.0) };
        jet.density.value = Dual::variable(40.0, 0, 1.0);
        jet.density.dx = Dual::constant(2.0);
        let g = pw_residuals(&jet, &pd);
        let expect = (60.0 / 200.0) / 0.01 - 100.0 * 2.0 / (40.0 * 40.0);
        assert_relative_eq!(g[1].d[0], expect, max_relative = 1e-12);
    }

    #[test]
    fn shadow_density_closed_forms() {
        let one = Matrix::identity(1);
        let v = shadow_gp_log_density(&[1.0], &one).unwrap();
        assert_relative_eq!(v, -0.5 * ((2.0 * core::f64::consts::PI).ln() + 1.0), max_relative = 1e-14);
        let k = Matrix::from_rows(&[[2.0, 0.3], [0.3, 1.5]]).unwrap();
        let v = shadow_gp_log_density(&[0.0, 0.0], &k).unwrap();
        let det: f64 = 2.0 * 1.5 - 0.09;
        let expect = -0.5 * (det.ln() + 2.0 * (2.0 * core::f64::consts::PI).ln());
        assert_relative_eq!(v, expect, max_relative = 1e-14);
        assert!(shadow_gp_log_density(&[0.0], &k).is_err());
    }

    #[test]
    fn spec_equation_counts() {
        for (m, w) in [(PhysicsModel::None, 0), (PhysicsModel::Lwr, 1), (PhysicsModel::Pw, 2), (PhysicsModel::Arz, 2), (PhysicsModel::Heat, 1)] {
            let s = PhysicsSpec::new(m, &[0.5], KernelFamily::SeArd).unwrap();
            assert_eq!(s.gammas.len(), w);
            assert_eq!(s.shadow.len(), w);
            assert_eq!(m.equation_count(), w);
        }
        assert!(PhysicsSpec::new(PhysicsModel::Pw, &[1.0, 2.0, 3.0], KernelFamily::SeArd).is_err());
        assert!(PhysicsSpec::new(PhysicsModel::Lwr, &[-1.0], KernelFamily::SeArd).is_err());
        assert!(!PhysicsSpec::new(PhysicsModel::Lwr, &[0.0], KernelFamily::SeArd).unwrap().is_active());
    }
}
