//! Nonlinear single-track vehicle with Dugoff lateral tire forces and
//! slip-dependent friction.
//!
//! Sample points use the joint layout `z = [v_x, v_y, r, F_xf, F_xr, delta]`
//! (state first, then input). The scalar constraint function is signed:
//! `G <= 0` is feasible and `G = 0` is the boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridgen::SampledSystem;

/// Number of state components `(v_x, v_y, r)`.
pub const STATE_DIM: usize = 3;
/// Number of input components `(F_xf, F_xr, delta)`.
pub const INPUT_DIM: usize = 3;
/// Joint dimension of a sample point.
pub const POINT_DIM: usize = STATE_DIM + INPUT_DIM;

/// Axis labels in sample-point order.
pub const AXIS_NAMES: [&str; POINT_DIM] = ["v_x", "v_y", "r", "F_xf", "F_xr", "delta"];

/// Absolute tolerance on the slip ratio returned by the force inversion.
pub const KAPPA_TOL: f64 = 1e-10;
/// Largest slip-ratio magnitude searched by the inversion.
pub const KAPPA_MAX: f64 = 0.999;

const KAPPA_SCAN_START: f64 = 1e-4;
const KAPPA_SCAN_RATIO: f64 = 1.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VehicleError {
    #[error("longitudinal speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("{axle} axle cannot transmit F_x = {force} N (slip-ratio inversion has no root)")]
    SaturatedInversion { axle: Axle, force: f64 },
    #[error("{axle} axle friction coefficient is not positive ({mu})")]
    FrictionExhausted { axle: Axle, mu: f64 },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("invalid vehicle parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axle {
    Front,
    Rear,
}

impl std::fmt::Display for Axle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axle::Front => f.write_str("front"),
            Axle::Rear => f.write_str("rear"),
        }
    }
}

/// Physical constants of the single-track model.
///
/// The defaults are the CarMaker BMW data set; gravity is 9.81 m/s².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    /// Mass [kg].
    pub m: f64,
    /// Yaw inertia [kg m²].
    #[serde(rename = "I_zz")]
    pub i_zz: f64,
    /// CoG to front axle [m].
    pub l_f: f64,
    /// CoG to rear axle [m].
    pub l_r: f64,
    #[serde(rename = "C_alpha_f")]
    pub c_alpha_f: f64,
    #[serde(rename = "C_alpha_r")]
    pub c_alpha_r: f64,
    #[serde(rename = "C_kappa_f")]
    pub c_kappa_f: f64,
    #[serde(rename = "C_kappa_r")]
    pub c_kappa_r: f64,
    /// Friction coefficient at zero slip velocity.
    pub mu_0: f64,
    /// Friction decay per unit of slip velocity.
    pub e_r: f64,
    pub g_grav: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1970.0,
            i_zz: 3498.0,
            l_f: 1.4778,
            l_r: 1.4102,
            c_alpha_f: 126_784.0,
            c_alpha_r: 213_983.0,
            c_kappa_f: 315_000.0,
            c_kappa_r: 286_700.0,
            mu_0: 1.076,
            e_r: 0.01,
            g_grav: 9.81,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let fields = [
            ("m", self.m),
            ("I_zz", self.i_zz),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("C_alpha_f", self.c_alpha_f),
            ("C_alpha_r", self.c_alpha_r),
            ("C_kappa_f", self.c_kappa_f),
            ("C_kappa_r", self.c_kappa_r),
            ("mu_0", self.mu_0),
            ("e_r", self.e_r),
            ("g_grav", self.g_grav),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(VehicleError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// Static front and rear normal loads (no load transfer).
    pub fn normal_loads(&self) -> (f64, f64) {
        let weight = self.m * self.g_grav;
        let wheelbase = self.l_f + self.l_r;
        (weight * self.l_r / wheelbase, weight * self.l_f / wheelbase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub v_x: f64,
    pub v_y: f64,
    pub r: f64,
}

impl State {
    pub fn new(v_x: f64, v_y: f64, r: f64) -> Self {
        Self { v_x, v_y, r }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.v_x, self.v_y, self.r]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    #[serde(rename = "F_xf")]
    pub f_xf: f64,
    #[serde(rename = "F_xr")]
    pub f_xr: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn new(f_xf: f64, f_xr: f64, delta: f64) -> Self {
        Self { f_xf, f_xr, delta }
    }

    pub fn to_array(self) -> [f64; INPUT_DIM] {
        [self.f_xf, self.f_xr, self.delta]
    }
}

/// Splits a joint sample point into state and input.
pub fn split_point(z: &[f64]) -> (State, ControlInput) {
    (
        State::new(z[0], z[1], z[2]),
        ControlInput::new(z[3], z[4], z[5]),
    )
}

pub fn join_point(x: State, u: ControlInput) -> [f64; POINT_DIM] {
    [x.v_x, x.v_y, x.r, u.f_xf, u.f_xr, u.delta]
}

/// Time derivative `(v̇_x, v̇_y, ṙ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateDerivative {
    pub v_x_dot: f64,
    pub v_y_dot: f64,
    pub r_dot: f64,
}

impl StateDerivative {
    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.v_x_dot, self.v_y_dot, self.r_dot]
    }

    pub fn norm(self) -> f64 {
        (self.v_x_dot.powi(2) + self.v_y_dot.powi(2) + self.r_dot.powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AxleTire {
    pub alpha: f64,
    pub kappa: f64,
    pub mu: f64,
    pub lambda_w: f64,
    pub f_y: f64,
    pub f_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TireQuantities {
    pub front: AxleTire,
    pub rear: AxleTire,
}

/// Box domain over the joint point `z = (x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, VehicleError> {
        let bounds = Self { lower, upper };
        bounds.validate()?;
        Ok(bounds)
    }

    /// State and input box of the evasive-maneuver domain.
    pub fn vehicle_default() -> Self {
        Self {
            lower: vec![5.0, -10.0, -0.6, -5000.0, -5000.0, -0.5],
            upper: vec![50.0, 10.0, 0.6, 0.0, 5000.0, 0.5],
        }
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(VehicleError::InvalidBounds(format!(
                "lower has {} entries, upper has {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (k, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(VehicleError::InvalidBounds(format!(
                    "axis {k}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && z
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Affine map of each axis onto `[0, 1]`.
    pub fn normalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(k, v)| (v - self.lower[k]) / self.width(k))
            .collect()
    }

    pub fn denormalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(k, v)| self.lower[k] + v * self.width(k))
            .collect()
    }

    pub fn clamp(&self, z: &mut [f64]) {
        for (k, v) in z.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }
}

/// Dugoff weighting function.
pub fn f_lambda(lambda_w: f64) -> f64 {
    if lambda_w < 1.0 {
        lambda_w * (2.0 - lambda_w)
    } else {
        1.0
    }
}

/// Per-axle Dugoff evaluation at a given slip angle and slip ratio.
#[derive(Debug, Clone, Copy)]
struct AxleModel {
    c_alpha: f64,
    c_kappa: f64,
    f_z: f64,
    mu_0: f64,
    e_r: f64,
    v_x: f64,
    alpha: f64,
    tan_alpha: f64,
}

#[derive(Debug, Clone, Copy)]
struct AxleEval {
    mu: f64,
    lambda_w: f64,
    f_x: f64,
    f_y: f64,
}

impl AxleModel {
    fn mu(&self, kappa: f64) -> f64 {
        self.mu_0 * (1.0 - self.e_r * self.v_x * kappa.hypot(self.tan_alpha))
    }

    fn eval(&self, kappa: f64) -> AxleEval {
        let mu = self.mu(kappa);
        let slip_norm = (self.c_kappa * kappa).hypot(self.c_alpha * self.tan_alpha);
        let lambda_w = if slip_norm == 0.0 {
            f64::INFINITY
        } else {
            mu * self.f_z * (1.0 - kappa) / (2.0 * slip_norm)
        };
        let weight = f_lambda(lambda_w);
        AxleEval {
            mu,
            lambda_w,
            f_x: self.c_kappa * kappa / (1.0 - kappa) * weight,
            f_y: self.c_alpha / (1.0 - kappa) * weight * self.alpha,
        }
    }

    /// Largest `|F_x|` on the inversion lattice in the direction of `dir`,
    /// or `None` when friction is exhausted at zero slip ratio.
    fn capacity(&self, dir: f64) -> Option<f64> {
        if self.mu(0.0) <= 0.0 {
            return None;
        }
        let mut best = 0.0f64;
        let mut step = KAPPA_SCAN_START;
        loop {
            let mag = step.min(KAPPA_MAX);
            let kappa = dir * mag;
            if self.mu(kappa) <= 0.0 {
                break;
            }
            best = best.max(self.eval(kappa).f_x.abs());
            if mag >= KAPPA_MAX {
                break;
            }
            step *= KAPPA_SCAN_RATIO;
        }
        Some(best)
    }

    /// Demand-over-capacity margin of an axle whose force cannot be inverted;
    /// positive whenever the inversion fails.
    fn saturation_margin(&self, target: f64) -> f64 {
        match self.capacity(target.signum()) {
            Some(cap) if cap > 0.0 => target.abs() / cap - 1.0,
            Some(_) => f64::INFINITY,
            None => self.e_r * self.v_x * self.tan_alpha.abs() - 1.0,
        }
    }

    /// Solves `F_x(kappa) = target` for the root of smallest magnitude.
    ///
    /// The slip axis is scanned outward from zero on a geometric lattice and
    /// the first sign change is refined by bisection.
    fn invert(&self, target: f64, axle: Axle) -> Result<f64, VehicleError> {
        if target == 0.0 {
            return Ok(0.0);
        }
        let dir = target.signum();
        let residual = |kappa: f64| self.eval(kappa).f_x - target;

        let mut lo = 0.0;
        let mut r_lo = residual(0.0);
        let mut step = KAPPA_SCAN_START;
        loop {
            let mag = step.min(KAPPA_MAX);
            let hi = dir * mag;
            if self.mu(hi) <= 0.0 {
                break;
            }
            let r_hi = residual(hi);
            if r_lo * r_hi <= 0.0 {
                return Ok(bisect(&residual, lo, hi, r_lo));
            }
            if mag >= KAPPA_MAX {
                break;
            }
            lo = hi;
            r_lo = r_hi;
            step *= KAPPA_SCAN_RATIO;
        }
        Err(VehicleError::SaturatedInversion { axle, force: target })
    }
}

fn bisect(residual: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut r_a: f64) -> f64 {
    while (b - a).abs() > KAPPA_TOL {
        let mid = 0.5 * (a + b);
        let r_mid = residual(mid);
        if r_mid == 0.0 {
            return mid;
        }
        if r_a * r_mid < 0.0 {
            b = mid;
        } else {
            a = mid;
            r_a = r_mid;
        }
    }
    0.5 * (a + b)
}

/// Slip angles `(alpha_f, alpha_r)` of the single-track kinematics.
pub fn slip_angles(p: &VehicleParams, x: &State, u: &ControlInput) -> (f64, f64) {
    let alpha_f = u.delta - ((x.v_y + p.l_f * x.r) / x.v_x).atan();
    let alpha_r = -((x.v_y - p.l_r * x.r) / x.v_x).atan();
    (alpha_f, alpha_r)
}

fn axle_models(p: &VehicleParams, x: &State, u: &ControlInput) -> (AxleModel, AxleModel) {
    let (alpha_f, alpha_r) = slip_angles(p, x, u);
    let (f_zf, f_zr) = p.normal_loads();
    let make = |c_alpha, c_kappa, f_z, alpha: f64| AxleModel {
        c_alpha,
        c_kappa,
        f_z,
        mu_0: p.mu_0,
        e_r: p.e_r,
        v_x: x.v_x,
        alpha,
        tan_alpha: alpha.tan(),
    };
    (
        make(p.c_alpha_f, p.c_kappa_f, f_zf, alpha_f),
        make(p.c_alpha_r, p.c_kappa_r, f_zr, alpha_r),
    )
}

fn solve_axle(model: &AxleModel, f_x: f64, axle: Axle) -> Result<AxleTire, VehicleError> {
    let kappa = model.invert(f_x, axle)?;
    let ev = model.eval(kappa);
    if ev.mu <= 0.0 {
        return Err(VehicleError::FrictionExhausted { axle, mu: ev.mu });
    }
    Ok(AxleTire {
        alpha: model.alpha,
        kappa,
        mu: ev.mu,
        lambda_w: ev.lambda_w,
        f_y: ev.f_y,
        f_z: model.f_z,
    })
}

/// Slip, friction and lateral force on both axles.
pub fn tire_quantities(
    p: &VehicleParams,
    x: &State,
    u: &ControlInput,
) -> Result<TireQuantities, VehicleError> {
    if !(x.v_x > 0.0) {
        return Err(VehicleError::NonPositiveSpeed(x.v_x));
    }
    let (front, rear) = axle_models(p, x, u);
    Ok(TireQuantities {
        front: solve_axle(&front, u.f_xf, Axle::Front)?,
        rear: solve_axle(&rear, u.f_xr, Axle::Rear)?,
    })
}

fn derivative_from_tires(
    p: &VehicleParams,
    x: &State,
    u: &ControlInput,
    t: &TireQuantities,
) -> StateDerivative {
    let (sin_d, cos_d) = u.delta.sin_cos();
    let f_yf = t.front.f_y;
    let f_yr = t.rear.f_y;
    StateDerivative {
        v_x_dot: (u.f_xf * cos_d - f_yf * sin_d + u.f_xr) / p.m + x.v_y * x.r,
        v_y_dot: (u.f_xf * sin_d + f_yf * cos_d + f_yr) / p.m - x.v_x * x.r,
        r_dot: (u.f_xf * sin_d * p.l_f + f_yf * cos_d * p.l_f - f_yr * p.l_r) / p.i_zz,
    }
}

pub fn dynamics(
    p: &VehicleParams,
    x: &State,
    u: &ControlInput,
) -> Result<StateDerivative, VehicleError> {
    let tires = tire_quantities(p, x, u)?;
    Ok(derivative_from_tires(p, x, u, &tires))
}

/// Forward-Euler step `x + dt * F(x, u)`.
pub fn step(p: &VehicleParams, x: &State, u: &ControlInput, dt: f64) -> Result<State, VehicleError> {
    if !(dt > 0.0) {
        return Err(VehicleError::NonPositiveStep(dt));
    }
    let d = dynamics(p, x, u)?;
    Ok(State::new(
        x.v_x + dt * d.v_x_dot,
        x.v_y + dt * d.v_y_dot,
        x.r + dt * d.r_dot,
    ))
}

/// Individual normalized constraint margins `lhs / rhs - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBreakdown {
    pub gg: f64,
    pub kamm_front: f64,
    pub kamm_rear: f64,
}

impl ConstraintBreakdown {
    pub fn max(&self) -> f64 {
        self.gg.max(self.kamm_front).max(self.kamm_rear)
    }
}

/// g-g diagram margin from the body-frame accelerations.
pub fn gg_margin(a_x: f64, a_y: f64, mu_min: f64, g_grav: f64) -> f64 {
    (a_x * a_x + a_y * a_y) / (mu_min * g_grav).powi(2) - 1.0
}

/// Kamm circle margin of one axle.
pub fn kamm_margin(f_x: f64, f_y: f64, mu: f64, f_z: f64) -> f64 {
    (f_x * f_x + f_y * f_y) / (mu * f_z).powi(2) - 1.0
}

pub fn constraint_breakdown(
    p: &VehicleParams,
    x: &State,
    u: &ControlInput,
) -> Result<ConstraintBreakdown, VehicleError> {
    let t = tire_quantities(p, x, u)?;
    let (sin_d, cos_d) = u.delta.sin_cos();
    // v̇_x - v_y r and v̇_y + v_x r reduce to the force sums over mass
    let a_x = (u.f_xf * cos_d - t.front.f_y * sin_d + u.f_xr) / p.m;
    let a_y = (u.f_xf * sin_d + t.front.f_y * cos_d + t.rear.f_y) / p.m;
    Ok(ConstraintBreakdown {
        gg: gg_margin(a_x, a_y, t.front.mu.min(t.rear.mu), p.g_grav),
        kamm_front: kamm_margin(u.f_xf, t.front.f_y, t.front.mu, t.front.f_z),
        kamm_rear: kamm_margin(u.f_xr, t.rear.f_y, t.rear.mu, t.rear.f_z),
    })
}

/// Signed constraint `G(x, u)`: the maximum of the g-g and both Kamm margins.
pub fn constraint_value(p: &VehicleParams, x: &State, u: &ControlInput) -> Result<f64, VehicleError> {
    constraint_breakdown(p, x, u).map(|b| b.max())
}

/// `G` extended to saturated tires: where an axle cannot deliver its force,
/// the value is the largest demand-over-capacity margin `|F_x| / max|F_x| - 1`
/// of the failing axles, which is positive. Elsewhere equal to
/// [`constraint_value`].
pub fn constraint_value_extended(
    p: &VehicleParams,
    x: &State,
    u: &ControlInput,
) -> Result<f64, VehicleError> {
    match constraint_value(p, x, u) {
        Err(VehicleError::SaturatedInversion { .. } | VehicleError::FrictionExhausted { .. }) => {
            let (front, rear) = axle_models(p, x, u);
            let margin = [(front, u.f_xf), (rear, u.f_xr)]
                .iter()
                .filter(|(m, f)| solve_axle(m, *f, Axle::Front).is_err())
                .map(|(m, f)| m.saturation_margin(*f))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(margin)
        }
        other => other,
    }
}

/// Box membership and `G <= 0`; tire failures count as infeasible.
pub fn is_feasible(p: &VehicleParams, x: &State, u: &ControlInput, bounds: &Bounds) -> bool {
    bounds.contains(&join_point(*x, *u))
        && constraint_value(p, x, u).map(|g| g <= 0.0).unwrap_or(false)
}

/// The vehicle as a generic sampled system for grid generation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleModel {
    pub params: VehicleParams,
}

impl VehicleModel {
    pub fn new(params: VehicleParams) -> Self {
        Self { params }
    }
}

impl SampledSystem for VehicleModel {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn input_dim(&self) -> usize {
        INPUT_DIM
    }

    fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
        let (x, u) = split_point(z);
        dynamics(&self.params, &x, &u)
            .ok()
            .map(|d| d.to_array().to_vec())
    }

    fn constraint(&self, z: &[f64]) -> Option<f64> {
        let (x, u) = split_point(z);
        constraint_value_extended(&self.params, &x, &u).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(v_x: f64) -> (State, ControlInput) {
        (State::new(v_x, 0.0, 0.0), ControlInput::default())
    }

    #[test]
    fn default_params_match_carmaker_table() {
        let p = VehicleParams::default();
        assert_eq!(p.m, 1970.0);
        assert_eq!(p.i_zz, 3498.0);
        assert_eq!(p.l_f, 1.4778);
        assert_eq!(p.l_r, 1.4102);
        assert_eq!(p.c_alpha_f, 126784.0);
        assert_eq!(p.c_alpha_r, 213983.0);
        assert_eq!(p.c_kappa_f, 315000.0);
        assert_eq!(p.c_kappa_r, 286700.0);
        assert_eq!(p.mu_0, 1.076);
        assert_eq!(p.e_r, 0.01);
        assert_eq!(p.g_grav, 9.81);
        p.validate().unwrap();
    }

    #[test]
    fn straight_rolling_has_no_slip() {
        let p = VehicleParams::default();
        let (x, u) = straight(20.0);
        let t = tire_quantities(&p, &x, &u).unwrap();
        for axle in [t.front, t.rear] {
            assert_eq!(axle.alpha, 0.0);
            assert_eq!(axle.kappa, 0.0);
            assert_eq!(axle.f_y, 0.0);
            assert_eq!(axle.mu, 1.076);
        }
    }

    #[test]
    fn front_normal_load_is_static_split() {
        // 1970 * 9.81 * 1.4102 / 2.888 by hand
        let p = VehicleParams::default();
        let (f_zf, f_zr) = p.normal_loads();
        assert_relative_eq!(f_zf, 9436.669716066483, max_relative = 1e-12);
        assert_relative_eq!(f_zf + f_zr, 1970.0 * 9.81, max_relative = 1e-14);
    }

    #[test]
    fn zero_slip_friction_is_independent_of_speed() {
        let p = VehicleParams::default();
        let (x, u) = straight(50.0);
        let t = tire_quantities(&p, &x, &u).unwrap();
        assert_eq!(t.front.mu, p.mu_0);
        assert_eq!(t.rear.mu, p.mu_0);
    }

    #[test]
    fn rejects_non_positive_speed() {
        let p = VehicleParams::default();
        let (x, u) = straight(0.0);
        assert_eq!(
            tire_quantities(&p, &x, &u),
            Err(VehicleError::NonPositiveSpeed(0.0))
        );
    }

    #[test]
    fn f_lambda_is_continuous_at_one() {
        assert_eq!(f_lambda(1.0), 1.0);
        assert_relative_eq!(f_lambda(1.0 - 1e-9), 1.0, epsilon = 1e-12);
        assert_eq!(f_lambda(0.5), 0.75);
    }

    #[test]
    fn straight_rolling_is_equilibrium() {
        let p = VehicleParams::default();
        for v_x in [5.0, 17.0, 50.0] {
            let (x, u) = straight(v_x);
            let d = dynamics(&p, &x, &u).unwrap();
            assert_eq!(d.to_array(), [0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn straight_front_braking() {
        let p = VehicleParams::default();
        let x = State::new(20.0, 0.0, 0.0);
        let u = ControlInput::new(-1000.0, 0.0, 0.0);
        let d = dynamics(&p, &x, &u).unwrap();
        assert_relative_eq!(d.v_x_dot, -1000.0 / 1970.0, max_relative = 1e-15);
        assert_eq!(d.v_y_dot, 0.0);
        assert_eq!(d.r_dot, 0.0);

        let next = step(&p, &x, &u, 0.01).unwrap();
        assert_relative_eq!(next.v_x, 20.0 - 0.01 * 1000.0 / 1970.0, max_relative = 1e-15);
    }

    #[test]
    fn braking_inversion_reproduces_force() {
        let p = VehicleParams::default();
        let x = State::new(30.0, 1.0, 0.1);
        let u = ControlInput::new(-3000.0, 2000.0, 0.05);
        let t = tire_quantities(&p, &x, &u).unwrap();
        let (front, rear) = axle_models(&p, &x, &u);
        assert!(t.front.kappa < 0.0 && t.rear.kappa > 0.0);
        assert_relative_eq!(front.eval(t.front.kappa).f_x, -3000.0, max_relative = 1e-4);
        assert_relative_eq!(rear.eval(t.rear.kappa).f_x, 2000.0, max_relative = 1e-4);
    }

    #[test]
    fn step_rejects_non_positive_dt() {
        let p = VehicleParams::default();
        let (x, u) = straight(10.0);
        assert!(matches!(step(&p, &x, &u, 0.0), Err(VehicleError::NonPositiveStep(_))));
        assert_eq!(step(&p, &x, &u, 0.1).unwrap(), x);
    }

    #[test]
    fn euler_half_steps_agree_to_second_order() {
        let p = VehicleParams::default();
        let x = State::new(25.0, 0.5, 0.05);
        let u = ControlInput::new(-500.0, 300.0, 0.02);
        let mut gaps = Vec::new();
        for dt in [1e-2, 5e-3] {
            let full = step(&p, &x, &u, dt).unwrap();
            let half = step(&p, &step(&p, &x, &u, dt / 2.0).unwrap(), &u, dt / 2.0).unwrap();
            gaps.push((full.v_y - half.v_y).abs() + (full.r - half.r).abs());
        }
        // halving dt quarters an O(dt^2) gap
        let ratio = gaps[0] / gaps[1];
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn straight_rolling_is_strictly_feasible() {
        let p = VehicleParams::default();
        let (x, u) = straight(20.0);
        let b = constraint_breakdown(&p, &x, &u).unwrap();
        assert_eq!(b.gg, -1.0);
        assert!(b.kamm_front < 0.0 && b.kamm_rear < 0.0);
        assert!(b.max() < 0.0);
        assert!(is_feasible(&p, &x, &u, &Bounds::vehicle_default()));
    }

    #[test]
    fn kamm_margin_is_zero_on_the_circle() {
        let (mu, f_z) = (0.9, 9000.0);
        assert_eq!(kamm_margin(mu * f_z, 0.0, mu, f_z), 0.0);
        assert_eq!(kamm_margin(-mu * f_z, 0.0, mu, f_z), 0.0);
        assert!(kamm_margin(0.5 * mu * f_z, 0.0, mu, f_z) < 0.0);
    }

    #[test]
    fn force_beyond_friction_is_saturated() {
        let p = VehicleParams::default();
        let (f_zf, _) = p.normal_loads();
        let x = State::new(20.0, 0.0, 0.0);
        let u = ControlInput::new(-1.01 * p.mu_0 * f_zf, 0.0, 0.0);
        assert!(matches!(
            tire_quantities(&p, &x, &u),
            Err(VehicleError::SaturatedInversion { axle: Axle::Front, .. })
        ));
        assert!(!is_feasible(&p, &x, &u, &Bounds::vehicle_default()));
    }

    #[test]
    fn extended_value_is_positive_under_saturation() {
        let p = VehicleParams::default();
        let (f_zf, _) = p.normal_loads();
        let x = State::new(20.0, 0.0, 0.0);
        let mild = ControlInput::new(-1.01 * p.mu_0 * f_zf, 0.0, 0.0);
        let hard = ControlInput::new(-1.5 * p.mu_0 * f_zf, 0.0, 0.0);
        let g_mild = constraint_value_extended(&p, &x, &mild).unwrap();
        let g_hard = constraint_value_extended(&p, &x, &hard).unwrap();
        assert!(g_mild > 0.0 && g_hard > g_mild, "{g_mild} {g_hard}");
    }

    #[test]
    fn extended_value_matches_where_defined() {
        let p = VehicleParams::default();
        let (x, u) = straight(20.0);
        assert_eq!(
            constraint_value_extended(&p, &x, &u).unwrap(),
            constraint_value(&p, &x, &u).unwrap()
        );
    }

    #[test]
    fn box_violation_is_infeasible() {
        let p = VehicleParams::default();
        let (x, u) = straight(60.0);
        assert!(!is_feasible(&p, &x, &u, &Bounds::vehicle_default()));
    }

    #[test]
    fn positive_margin_is_infeasible() {
        // front friction collapses under large slip while the rear pushes
        let p = VehicleParams::default();
        let x = State::new(5.0, -10.0, -0.6);
        let u = ControlInput::new(0.0, -5000.0, 0.5);
        let g = constraint_value(&p, &x, &u).unwrap();
        assert!(g > 0.0, "G = {g}");
        assert!(!is_feasible(&p, &x, &u, &Bounds::vehicle_default()));
    }

    #[test]
    fn params_json_uses_field_names() {
        let json = serde_json::to_value(VehicleParams::default()).unwrap();
        for key in [
            "m", "I_zz", "l_f", "l_r", "C_alpha_f", "C_alpha_r", "C_kappa_f", "C_kappa_r", "mu_0",
            "e_r", "g_grav",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let back: VehicleParams = serde_json::from_value(json).unwrap();
        assert_eq!(back, VehicleParams::default());
    }

    #[test]
    fn bounds_normalization_round_trips() {
        let b = Bounds::vehicle_default();
        let z = [12.0, -3.0, 0.1, -2500.0, 1200.0, -0.2];
        let s = b.normalize(&z);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, c) in b.denormalize(&s).iter().zip(z) {
            assert_relative_eq!(*a, c, max_relative = 1e-12);
        }
        assert!(Bounds::new(vec![0.0], vec![0.0]).is_err());
    }
}
