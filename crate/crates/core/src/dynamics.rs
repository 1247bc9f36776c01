//! Longitudinal vehicle dynamics, powertrain kinematics and fuel bookkeeping.
//!
//! The model is the classic car-following triple (separation, host speed,
//! lead speed) driven by wheel torque against rolling, aerodynamic and grade
//! resistance, integrated with explicit Euler at a fixed step. All operations
//! are pure functions of value inputs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuel::FuelModel;

pub const DEFAULT_DT_S: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite input to step ({0})")]
    NonFinite(&'static str),
    #[error("operating point outside engine envelope: {reason:?} at {point:?}")]
    OutOfEnvelope {
        reason: EnvelopeViolation,
        point: PowertrainPoint,
    },
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeViolation {
    TorqueAboveMax,
    SpeedBelowMin,
    SpeedAboveMax,
}

/// Physical and powertrain constants of the host vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub mass_kg: f64,
    pub frontal_area_m2: f64,
    pub drag_coeff: f64,
    pub rolling_coeff: f64,
    pub wheel_radius_m: f64,
    pub air_density_kg_m3: f64,
    pub gravity_m_s2: f64,
    /// Strictly decreasing, all positive. Index 0 is the launch gear.
    pub gear_ratios: Vec<f64>,
    pub final_drive_ratio: f64,
    pub driveline_efficiency: f64,
    pub max_engine_torque_nm: f64,
    /// Magnitude of the maximum service-brake torque at the wheel.
    pub max_brake_torque_nm: f64,
    /// (min, max) operating engine speed.
    pub engine_speed_range_rpm: (f64, f64),
    pub fuel_model: FuelModel,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass_kg: 12_000.0,
            frontal_area_m2: 7.71,
            drag_coeff: 0.08,
            rolling_coeff: 0.015,
            wheel_radius_m: 0.5,
            air_density_kg_m3: 1.2,
            gravity_m_s2: 9.81,
            gear_ratios: geometric_ladder(12.8, 1.0, 10),
            final_drive_ratio: 3.7,
            driveline_efficiency: 0.95,
            max_engine_torque_nm: 1200.0,
            max_brake_torque_nm: 15_000.0,
            engine_speed_range_rpm: (600.0, 3000.0),
            fuel_model: FuelModel::default(),
        }
    }
}

/// Evenly spaced gear ratios on a log scale from `first` down to `last`.
pub fn geometric_ladder(first: f64, last: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && first > last && last > 0.0);
    let step = (last / first).powf(1.0 / (n - 1) as f64);
    (0..n).map(|i| first * step.powi(i as i32)).collect()
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let err = |m: String| Err(DynamicsError::InvalidParams(m));
        if !(self.mass_kg > 0.0) {
            return err(format!("mass_kg must be positive, got {}", self.mass_kg));
        }
        if !(self.wheel_radius_m > 0.0) {
            return err("wheel_radius_m must be positive".into());
        }
        if !(self.max_brake_torque_nm > 0.0) {
            return err("max_brake_torque_nm must be positive".into());
        }
        if !(self.final_drive_ratio > 0.0) {
            return err("final_drive_ratio must be positive".into());
        }
        if !(self.driveline_efficiency > 0.0 && self.driveline_efficiency <= 1.0) {
            return err("driveline_efficiency must lie in (0, 1]".into());
        }
        if self.gear_ratios.is_empty() {
            return err("gear_ratios must not be empty".into());
        }
        for w in self.gear_ratios.windows(2) {
            if !(w[0] > w[1]) {
                return err("gear_ratios must be strictly decreasing".into());
            }
        }
        if !(self.gear_ratios[self.gear_ratios.len() - 1] > 0.0) {
            return err("gear_ratios must all be positive".into());
        }
        if !(self.engine_speed_range_rpm.0 >= 0.0
            && self.engine_speed_range_rpm.1 > self.engine_speed_range_rpm.0)
        {
            return err("engine_speed_range_rpm must be an increasing pair".into());
        }
        Ok(())
    }

    pub fn num_gears(&self) -> usize {
        self.gear_ratios.len()
    }

    pub fn top_gear(&self) -> usize {
        self.gear_ratios.len() - 1
    }

    /// Combined gearbox * final drive ratio for a gear.
    pub fn total_ratio(&self, gear: usize) -> f64 {
        self.gear_ratios[gear] * self.final_drive_ratio
    }

    /// Maximum positive wheel torque the engine can deliver in a gear.
    pub fn max_wheel_torque_nm(&self, gear: usize) -> f64 {
        self.max_engine_torque_nm * self.total_ratio(gear) * self.driveline_efficiency
    }

    /// Largest positive wheel torque across all gears; a convenient fixed
    /// upper bound for action spaces.
    pub fn max_wheel_torque_any_gear_nm(&self) -> f64 {
        self.max_wheel_torque_nm(0)
    }

    /// Engine speed implied by a road speed in a gear.
    pub fn engine_speed_rpm(&self, host_speed_m_s: f64, gear: usize) -> f64 {
        host_speed_m_s / self.wheel_radius_m * self.total_ratio(gear) * 60.0
            / std::f64::consts::TAU
    }

    /// Positive wheel torque deliverable right now: the engine cap in this
    /// gear, with traction cut above redline (fuel cut / overspeed).
    pub fn deliverable_upper_nm(&self, host_speed_m_s: f64, gear: usize) -> f64 {
        if self.engine_speed_rpm(host_speed_m_s, gear) >= self.engine_speed_range_rpm.1 {
            0.0
        } else {
            self.max_wheel_torque_nm(gear)
        }
    }

    /// Clamp a requested wheel torque to what brakes and engine can do.
    pub fn clamp_wheel_torque(&self, requested_nm: f64, host_speed_m_s: f64, gear: usize) -> f64 {
        requested_nm.clamp(
            -self.max_brake_torque_nm,
            self.deliverable_upper_nm(host_speed_m_s, gear),
        )
    }
}

/// Instantaneous car-following state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Separation distance to the lead vehicle (m).
    pub separation_m: f64,
    pub host_speed_m_s: f64,
    pub lead_speed_m_s: f64,
    pub gear_index: usize,
    pub grade_rad: f64,
    /// Wheel torque applied on the previous step (N*m).
    pub prev_wheel_torque_nm: f64,
    pub time_s: f64,
}

impl SimState {
    pub fn at_rest(separation_m: f64) -> Self {
        SimState {
            separation_m,
            host_speed_m_s: 0.0,
            lead_speed_m_s: 0.0,
            gear_index: 0,
            grade_rad: 0.0,
            prev_wheel_torque_nm: 0.0,
            time_s: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.separation_m.is_finite()
            && self.host_speed_m_s.is_finite()
            && self.lead_speed_m_s.is_finite()
            && self.grade_rad.is_finite()
            && self.prev_wheel_torque_nm.is_finite()
            && self.time_s.is_finite()
    }
}

/// Engine-side operating point for a wheel torque request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowertrainPoint {
    pub engine_speed_rpm: f64,
    pub engine_torque_nm: f64,
    pub wheel_torque_nm: f64,
    pub fuel_rate_g_s: f64,
}

/// Total resistance force: aerodynamic drag, rolling resistance and grade.
///
/// `F_r = 1/2 rho A c_d v^2 + m g f cos(theta) + m g sin(theta)`; may be
/// negative on a sufficient downgrade.
pub fn resistance_force(state: &SimState, params: &VehicleParams) -> f64 {
    let v = state.host_speed_m_s;
    let aero = 0.5 * params.air_density_kg_m3 * params.frontal_area_m2 * params.drag_coeff * v * v;
    let mg = params.mass_kg * params.gravity_m_s2;
    aero + mg * params.rolling_coeff * state.grade_rad.cos() + mg * state.grade_rad.sin()
}

/// Host acceleration produced by a wheel torque at the current state.
pub fn host_accel(state: &SimState, wheel_torque_nm: f64, params: &VehicleParams) -> f64 {
    wheel_torque_nm / (params.wheel_radius_m * params.mass_kg)
        - resistance_force(state, params) / params.mass_kg
}

/// One explicit-Euler step of the car-following state.
///
/// Speeds are floored at zero (no reverse driving); torque demand below what
/// keeps the host at rest is truncated by that floor. The lead follows the
/// supplied acceleration. `prev_wheel_torque` records the applied torque.
pub fn step(
    state: &SimState,
    wheel_torque_nm: f64,
    lead_accel_m_s2: f64,
    dt_s: f64,
    params: &VehicleParams,
) -> Result<SimState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !wheel_torque_nm.is_finite() {
        return Err(DynamicsError::NonFinite("wheel_torque_nm"));
    }
    if !lead_accel_m_s2.is_finite() {
        return Err(DynamicsError::NonFinite("lead_accel_m_s2"));
    }
    if !(dt_s.is_finite() && dt_s > 0.0) {
        return Err(DynamicsError::NonFinite("dt_s"));
    }

    let a_h = host_accel(state, wheel_torque_nm, params);
    let host = (state.host_speed_m_s + dt_s * a_h).max(0.0);
    let lead = (state.lead_speed_m_s + dt_s * lead_accel_m_s2).max(0.0);
    let separation =
        state.separation_m + dt_s * (state.lead_speed_m_s - state.host_speed_m_s);

    Ok(SimState {
        separation_m: separation,
        host_speed_m_s: host,
        lead_speed_m_s: lead,
        gear_index: state.gear_index,
        grade_rad: state.grade_rad,
        prev_wheel_torque_nm: wheel_torque_nm,
        time_s: state.time_s + dt_s,
    })
}

/// Back-compute the engine operating point behind a wheel torque.
///
/// Driveline efficiency multiplies on the power-receiving side: positive
/// wheel torque costs `T_w / (i * eta)` at the engine, negative wheel torque
/// returns `T_w * eta / i`. Fuel clamps to idle at non-positive engine power.
/// Errors with `OutOfEnvelope` when the engine cannot realize the point; the
/// offending point is carried in the error for callers that only log it.
pub fn powertrain_point(
    state: &SimState,
    wheel_torque_nm: f64,
    params: &VehicleParams,
) -> Result<PowertrainPoint, DynamicsError> {
    let point = powertrain_point_unchecked(state, wheel_torque_nm, params);
    let (min_rpm, max_rpm) = params.engine_speed_range_rpm;
    let reason = if point.engine_torque_nm > params.max_engine_torque_nm {
        Some(EnvelopeViolation::TorqueAboveMax)
    } else if point.engine_speed_rpm < min_rpm {
        Some(EnvelopeViolation::SpeedBelowMin)
    } else if point.engine_speed_rpm > max_rpm {
        Some(EnvelopeViolation::SpeedAboveMax)
    } else {
        None
    };
    match reason {
        Some(reason) => Err(DynamicsError::OutOfEnvelope { reason, point }),
        None => Ok(point),
    }
}

/// Same as [`powertrain_point`] but never fails; used for fuel bookkeeping
/// where the envelope check is someone else's concern.
pub fn powertrain_point_unchecked(
    state: &SimState,
    wheel_torque_nm: f64,
    params: &VehicleParams,
) -> PowertrainPoint {
    let ratio = params.total_ratio(state.gear_index);
    let engine_speed_rpm = params.engine_speed_rpm(state.host_speed_m_s, state.gear_index);
    let engine_torque_nm = if wheel_torque_nm >= 0.0 {
        wheel_torque_nm / (ratio * params.driveline_efficiency)
    } else {
        wheel_torque_nm * params.driveline_efficiency / ratio
    };
    let fuel_rate_g_s = params.fuel_model.rate_g_s(engine_speed_rpm, engine_torque_nm);
    PowertrainPoint {
        engine_speed_rpm,
        engine_torque_nm,
        wheel_torque_nm,
        fuel_rate_g_s,
    }
}

/// Apply a gear-change request, clamped to the transmission's range.
/// A shift past either end is a no-op; the realized change is
/// `new.gear_index - old.gear_index`.
pub fn apply_gear_change(state: &SimState, delta: i32, params: &VehicleParams) -> SimState {
    let top = params.top_gear() as i64;
    let next = (state.gear_index as i64 + delta as i64).clamp(0, top) as usize;
    SimState {
        gear_index: next,
        ..*state
    }
}

/// Lowest gear whose engine speed stays at or below `target_rpm` for a road
/// speed (falling back to top gear). Used to pick sensible initial gears.
pub fn gear_for_speed(params: &VehicleParams, host_speed_m_s: f64, target_rpm: f64) -> usize {
    for gear in 0..params.num_gears() {
        if params.engine_speed_rpm(host_speed_m_s, gear) <= target_rpm {
            return gear;
        }
    }
    params.top_gear()
}
