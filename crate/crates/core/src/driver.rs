//! Lead-vehicle drive cycles and the IDM driver model.
//!
//! Cycles are piecewise-linear (time, speed) tables: bundled synthetic
//! generators stand in for standardized cycles, and external ones load from
//! CSV. Episode randomization derives everything deterministically from
//! (seed, episode index).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{gear_for_speed, resistance_force, SimState, VehicleParams};
use crate::safety::{self, FilterKind, LeadAccelMode, SafetyConfig};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("time {t} s outside cycle [0, {end}] s")]
    OutOfRange { t: f64, end: f64 },
    #[error("invalid drive cycle: {0}")]
    InvalidCycle(String),
    #[error("failed to read drive cycle {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("drive cycle {0}: {1}")]
    Parse(String, String),
    #[error("could not sample a barrier-admissible initial state in {0} attempts")]
    InitSamplingExhausted(usize),
}

/// A lead-vehicle speed profile with piecewise-linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveCycle {
    pub name: String,
    /// Strictly increasing times starting at 0; speeds >= 0.
    pub samples: Vec<(f64, f64)>,
}

impl DriveCycle {
    pub fn new(name: impl Into<String>, samples: Vec<(f64, f64)>) -> Result<Self, DriverError> {
        let cycle = DriveCycle {
            name: name.into(),
            samples,
        };
        cycle.validate()?;
        Ok(cycle)
    }

    fn validate(&self) -> Result<(), DriverError> {
        if self.samples.len() < 2 {
            return Err(DriverError::InvalidCycle("need at least two samples".into()));
        }
        if self.samples[0].0 != 0.0 {
            return Err(DriverError::InvalidCycle("time must start at 0".into()));
        }
        for w in self.samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(DriverError::InvalidCycle(format!(
                    "time not strictly increasing at {} s",
                    w[1].0
                )));
            }
        }
        if let Some((t, v)) = self
            .samples
            .iter()
            .find(|(t, v)| !(t.is_finite() && v.is_finite() && *v >= 0.0))
        {
            return Err(DriverError::InvalidCycle(format!(
                "bad sample ({t}, {v}); speeds must be finite and non-negative"
            )));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    /// Load the CSV interface format: header `time_s,speed_m_s`.
    pub fn from_csv(path: &Path) -> Result<Self, DriverError> {
        let pstr = path.display().to_string();
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DriverError::Io {
                path: pstr.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => DriverError::Parse(pstr.clone(), e.to_string()),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| DriverError::Parse(pstr.clone(), e.to_string()))?
            .clone();
        let got: Vec<&str> = headers.iter().map(|h| h.trim()).collect();
        if got != ["time_s", "speed_m_s"] {
            return Err(DriverError::Parse(
                pstr,
                format!("expected header [time_s, speed_m_s], got {got:?}"),
            ));
        }
        let mut samples = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| DriverError::Parse(pstr.clone(), e.to_string()))?;
            let parse = |field: &str| -> Result<f64, DriverError> {
                field.trim().parse().map_err(|_| {
                    DriverError::Parse(pstr.clone(), format!("row {}: bad number {field:?}", i + 2))
                })
            };
            let t = parse(record.get(0).unwrap_or(""))?;
            let v = parse(record.get(1).unwrap_or(""))?;
            samples.push((t, v));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into());
        DriveCycle::new(name, samples)
    }
}

/// Speed and acceleration of the lead at a time inside the cycle.
///
/// Speed interpolates linearly; acceleration is the segment slope, with the
/// average of adjacent slopes exactly at sample points.
pub fn lead_state_at(cycle: &DriveCycle, time_s: f64) -> Result<(f64, f64), DriverError> {
    let end = cycle.duration_s();
    if !(0.0..=end).contains(&time_s) {
        return Err(DriverError::OutOfRange { t: time_s, end });
    }
    let s = &cycle.samples;
    let idx = s.partition_point(|(t, _)| *t < time_s);
    let slope = |i: usize| (s[i + 1].1 - s[i].1) / (s[i + 1].0 - s[i].0);

    if idx < s.len() && s[idx].0 == time_s {
        // Exactly on a sample point: central difference of slopes.
        let before = if idx > 0 { Some(slope(idx - 1)) } else { None };
        let after = if idx + 1 < s.len() { Some(slope(idx)) } else { None };
        let accel = match (before, after) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => 0.0,
        };
        return Ok((s[idx].1, accel));
    }
    let i = idx - 1;
    let a = slope(i);
    Ok((s[i].1 + a * (time_s - s[i].0), a))
}

/// IDM driver parameters (Treiber form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub desired_speed_m_s: f64,
    pub time_headway_s: f64,
    pub min_gap_m: f64,
    pub max_accel_m_s2: f64,
    pub comfort_decel_m_s2: f64,
    pub accel_exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed_m_s: 30.0,
            time_headway_s: 1.5,
            min_gap_m: 2.0,
            max_accel_m_s2: 1.5,
            comfort_decel_m_s2: 2.0,
            accel_exponent: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), DriverError> {
        let all = [
            self.desired_speed_m_s,
            self.time_headway_s,
            self.min_gap_m,
            self.max_accel_m_s2,
            self.comfort_decel_m_s2,
            self.accel_exponent,
        ];
        if all.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(DriverError::InvalidCycle(
                "IDM parameters must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Requested accelerations are clamped to this comfort envelope.
pub const IDM_ACCEL_CLAMP: (f64, f64) = (-4.0, 3.0);

/// Desired acceleration of the IDM driver.
///
/// `a = a_max (1 - (v/v0)^delta - (s*/z)^2)` with
/// `s* = s0 + v T + v (v - v_l) / (2 sqrt(a_max b))`; the gap term drops
/// when no lead is present. Output clamped to [`IDM_ACCEL_CLAMP`].
pub fn idm_acceleration(state: &SimState, params: &IdmParams, lead_present: bool) -> f64 {
    let v = state.host_speed_m_s;
    let free = 1.0 - (v / params.desired_speed_m_s).powf(params.accel_exponent);
    let interaction = if lead_present {
        let s_star = params.min_gap_m
            + v * params.time_headway_s
            + v * (v - state.lead_speed_m_s)
                / (2.0 * (params.max_accel_m_s2 * params.comfort_decel_m_s2).sqrt());
        let gap = state.separation_m.max(1e-6);
        (s_star / gap).powi(2)
    } else {
        0.0
    };
    (params.max_accel_m_s2 * (free - interaction)).clamp(IDM_ACCEL_CLAMP.0, IDM_ACCEL_CLAMP.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKind {
    Urban,
    Highway,
    Sawtooth,
}

/// Deterministic synthetic drive cycle.
///
/// Urban cycles stop at least four times per 600 s and stay below 25 m/s;
/// highway cycles stay below 35 m/s; the sawtooth is a fixed 0-15-0 ramp
/// pattern useful for debugging.
pub fn synthesize_cycle(kind: CycleKind, duration_s: f64, seed: u64) -> DriveCycle {
    assert!(duration_s > 0.0, "duration must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1c1e);
    let dt = 1.0;
    let n = (duration_s / dt).ceil() as usize;
    let mut samples = Vec::with_capacity(n + 1);
    match kind {
        CycleKind::Sawtooth => {
            // 0 -> 15 -> 0 triangles, 50 s period.
            for k in 0..=n {
                let t = k as f64 * dt;
                let phase = (t % 50.0) / 25.0;
                let v = if phase <= 1.0 { 15.0 * phase } else { 15.0 * (2.0 - phase) };
                samples.push((t, v));
            }
        }
        CycleKind::Urban | CycleKind::Highway => {
            let (v_lo, v_hi, cap) = match kind {
                CycleKind::Urban => (6.0, 16.0, 25.0),
                _ => (18.0, 32.0, 35.0),
            };
            #[derive(Clone, Copy)]
            enum Phase {
                Accel { target: f64, rate: f64 },
                Cruise { until: f64, target: f64 },
                Decel { rate: f64 },
                Dwell { until: f64 },
            }
            let mut v: f64 = 0.0;
            let mut phase = Phase::Accel {
                target: rng.random_range(v_lo..v_hi),
                rate: rng.random_range(0.7..1.2),
            };
            // Urban segments are short enough to guarantee >= 4 stops
            // per 600 s; highway cruises much longer.
            let cruise_range = match kind {
                CycleKind::Urban => 8.0..30.0,
                _ => 40.0..120.0,
            };
            for k in 0..=n {
                let t = k as f64 * dt;
                samples.push((t, v.clamp(0.0, cap)));
                match phase {
                    Phase::Accel { target, rate } => {
                        v = (v + rate * dt).min(target);
                        if v >= target {
                            phase = Phase::Cruise {
                                until: t + rng.random_range(cruise_range.clone()),
                                target,
                            };
                        }
                    }
                    Phase::Cruise { until, target } => {
                        // mild wander around the cruise target
                        v = (v + rng.random_range(-0.3..0.3)).clamp(
                            (target - 1.5).max(0.0),
                            (target + 1.5).min(cap),
                        );
                        if t >= until {
                            phase = Phase::Decel {
                                rate: rng.random_range(0.8..1.5),
                            };
                        }
                    }
                    Phase::Decel { rate } => {
                        v = (v - rate * dt).max(0.0);
                        if v <= 0.0 {
                            phase = Phase::Dwell {
                                until: t + rng.random_range(3.0..10.0),
                            };
                        }
                    }
                    Phase::Dwell { until } => {
                        v = 0.0;
                        if t >= until {
                            phase = Phase::Accel {
                                target: rng.random_range(v_lo..v_hi),
                                rate: rng.random_range(0.7..1.2),
                            };
                        }
                    }
                }
            }
        }
    }
    let name = match kind {
        CycleKind::Urban => format!("urban-{seed}"),
        CycleKind::Highway => format!("highway-{seed}"),
        CycleKind::Sawtooth => format!("sawtooth-{seed}"),
    };
    DriveCycle::new(name, samples).expect("synthetic cycles are valid by construction")
}

/// Splice hard lead-braking events into a cycle: at each event the lead
/// brakes at `decel_m_s2` to a stop, dwells, then recovers at 1 m/s^2 until
/// it rejoins the base profile. Event times are seeded and spread over the
/// middle of the cycle.
pub fn inject_brake_events(
    base: &DriveCycle,
    events: usize,
    decel_m_s2: f64,
    seed: u64,
) -> DriveCycle {
    if events == 0 {
        return base.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4a4e_5eed);
    let duration = base.duration_s();
    let mut starts: Vec<f64> = (0..events)
        .map(|i| {
            let lo = duration * (0.15 + 0.7 * i as f64 / events as f64);
            let hi = duration * (0.15 + 0.7 * (i as f64 + 0.8) / events as f64);
            rng.random_range(lo..hi)
        })
        .collect();
    starts.sort_by(|a, b| a.total_cmp(b));

    let dt = 0.5;
    let n = (duration / dt).ceil() as usize;
    #[derive(PartialEq)]
    enum Mode {
        Follow,
        Brake,
        Dwell(f64),
        Recover,
    }
    let mut mode = Mode::Follow;
    let mut v = base.samples[0].1;
    let mut next_event = 0;
    let mut samples = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = (k as f64 * dt).min(duration);
        let (base_v, _) = lead_state_at(base, t).expect("t within base cycle");
        match mode {
            Mode::Follow => {
                v = base_v;
                if next_event < starts.len() && t >= starts[next_event] && v > 1.0 {
                    next_event += 1;
                    mode = Mode::Brake;
                }
            }
            Mode::Brake => {
                v = (v - decel_m_s2 * dt).max(0.0);
                if v == 0.0 {
                    mode = Mode::Dwell(t + 4.0);
                }
            }
            Mode::Dwell(until) => {
                v = 0.0;
                if t >= until {
                    mode = Mode::Recover;
                }
            }
            Mode::Recover => {
                v += 1.0 * dt;
                if v >= base_v {
                    v = base_v;
                    mode = Mode::Follow;
                }
            }
        }
        samples.push((t, v));
    }
    DriveCycle::new(format!("{}+{}slams", base.name, events), samples)
        .expect("spliced cycles are valid by construction")
}

/// Clamp a cycle's deceleration to the modeled lead braking bound: the
/// safety geometry certifies against a lead that never brakes harder than
/// `a_lead_max`, so the environment must honor that bound even after speed
/// noise and event splicing.
pub fn limit_cycle_decel(cycle: &DriveCycle, max_decel_m_s2: f64) -> DriveCycle {
    assert!(max_decel_m_s2 > 0.0);
    let mut samples = Vec::with_capacity(cycle.samples.len());
    let mut prev: Option<(f64, f64)> = None;
    for &(t, v) in &cycle.samples {
        let limited = match prev {
            Some((tp, vp)) => v.max(vp - max_decel_m_s2 * (t - tp)),
            None => v,
        };
        samples.push((t, limited));
        prev = Some((t, limited));
    }
    DriveCycle::new(cycle.name.clone(), samples).expect("decel clamp keeps cycles valid")
}

/// Episode-to-episode randomization of the training distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomizationSpec {
    pub speed_noise_std_m_s: f64,
    pub initial_gap_range_m: (f64, f64),
    pub grade_range_rad: (f64, f64),
    pub mass_range_kg: (f64, f64),
    pub idm_jitter_fraction: f64,
    pub seed: u64,
}

impl Default for RandomizationSpec {
    fn default() -> Self {
        RandomizationSpec {
            speed_noise_std_m_s: 0.5,
            initial_gap_range_m: (10.0, 60.0),
            grade_range_rad: (-0.03, 0.03),
            mass_range_kg: (5000.0, 12_000.0),
            idm_jitter_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RandomizationSpec {
    pub fn validate(&self) -> Result<(), DriverError> {
        let ranges = [
            self.initial_gap_range_m,
            self.grade_range_rad,
            self.mass_range_kg,
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(DriverError::InvalidCycle(
                "randomization ranges must be ordered (lo <= hi)".into(),
            ));
        }
        if !(self.speed_noise_std_m_s >= 0.0 && self.idm_jitter_fraction >= 0.0) {
            return Err(DriverError::InvalidCycle(
                "noise magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Everything an episode needs, derived from (seed, episode_index).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSetup {
    pub cycle: DriveCycle,
    pub init: SimState,
    pub vehicle: VehicleParams,
    pub idm: IdmParams,
}

fn episode_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&episode_index.to_le_bytes());
    bytes[16] = 0xe7;
    ChaCha8Rng::from_seed(bytes)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministically perturb a base cycle and sample an initial state.
///
/// Speed noise is a smoothed (AR(1)) perturbation floored at zero; mass,
/// grade, initial gap and IDM parameters draw from the configured ranges.
/// The initial state is resampled until it is admissible for both filter
/// kinds under worst-case lead braking (so matched-seed comparisons across
/// filters see identical episodes), and the episode errors out after 1000
/// rejections.
pub fn randomize_episode(
    spec: &RandomizationSpec,
    base: &DriveCycle,
    episode_index: u64,
    vehicle: &VehicleParams,
    idm: &IdmParams,
    safety_cfg: &SafetyConfig,
) -> Result<EpisodeSetup, DriverError> {
    let mut rng = episode_rng(spec.seed, episode_index);

    let cycle = if spec.speed_noise_std_m_s > 0.0 {
        let rho: f64 = 0.9;
        let scale = spec.speed_noise_std_m_s * (1.0 - rho * rho).sqrt();
        let mut noise = 0.0;
        let samples = base
            .samples
            .iter()
            .map(|&(t, v)| {
                noise = rho * noise + scale * rng.random_range(-1.73..1.73);
                // keep stops intact so stop-and-go structure survives
                let v2 = if v == 0.0 { 0.0 } else { (v + noise).max(0.0) };
                (t, v2)
            })
            .collect();
        DriveCycle::new(format!("{}~n{}", base.name, episode_index), samples)
            .expect("noise keeps cycles valid")
    } else {
        base.clone()
    };

    let mass = uniform(&mut rng, spec.mass_range_kg);
    let grade = uniform(&mut rng, spec.grade_range_rad);
    let jitter = |rng: &mut ChaCha8Rng, x: f64, frac: f64| {
        if frac > 0.0 {
            x * (1.0 + rng.random_range(-frac..frac))
        } else {
            x
        }
    };
    let f = spec.idm_jitter_fraction;
    let idm = IdmParams {
        desired_speed_m_s: jitter(&mut rng, idm.desired_speed_m_s, f),
        time_headway_s: jitter(&mut rng, idm.time_headway_s, f),
        min_gap_m: jitter(&mut rng, idm.min_gap_m, f),
        max_accel_m_s2: jitter(&mut rng, idm.max_accel_m_s2, f),
        comfort_decel_m_s2: jitter(&mut rng, idm.comfort_decel_m_s2, f),
        accel_exponent: idm.accel_exponent,
    };

    let mut vehicle = vehicle.clone();
    vehicle.mass_kg = mass;

    let (v_l0, _) = lead_state_at(&cycle, 0.0).expect("cycle starts at 0");
    let worst = SafetyConfig {
        lead_accel_mode: LeadAccelMode::WorstCase,
        ..safety_cfg.clone()
    };

    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..MAX_ATTEMPTS {
        let gap = uniform(&mut rng, spec.initial_gap_range_m);
        let v_h = (v_l0 + rng.random_range(-3.0..3.0)).clamp(0.0, safety_cfg.v_host_max_m_s);
        let mut state = SimState {
            separation_m: safety_cfg.z0_m + gap,
            host_speed_m_s: v_h,
            lead_speed_m_s: v_l0,
            gear_index: gear_for_speed(&vehicle, v_h, 1800.0),
            grade_rad: grade,
            prev_wheel_torque_nm: 0.0,
            time_s: 0.0,
        };
        let equilibrium = resistance_force(&state, &vehicle) * vehicle.wheel_radius_m;
        state.prev_wheel_torque_nm =
            vehicle.clamp_wheel_torque(equilibrium, v_h, state.gear_index);

        if initial_state_admissible(&state, &vehicle, &worst) {
            return Ok(EpisodeSetup {
                cycle,
                init: state,
                vehicle,
                idm,
            });
        }
    }
    Err(DriverError::InitSamplingExhausted(MAX_ATTEMPTS))
}

/// Inside C0, C1 and C2 (the filter can establish v2 >= 0 within actuator
/// bounds) for both filter kinds.
fn initial_state_admissible(
    state: &SimState,
    vehicle: &VehicleParams,
    worst: &SafetyConfig,
) -> bool {
    for kind in [FilterKind::Hocbf, FilterKind::Ecbf] {
        let barrier = safety::eval_barrier(state, 0.0, vehicle, worst, kind);
        if barrier.v0 < 0.0 || barrier.v1 < 0.0 {
            return false;
        }
        let filtered = safety::filter_action(
            state.prev_wheel_torque_nm,
            state,
            0.0,
            vehicle,
            worst,
            kind,
        );
        if filtered.infeasible || filtered.barrier.v2_at(filtered.safe_torque_nm) < -1e-9 {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_cycle_has_zero_accel() {
        let c = DriveCycle::new("const", vec![(0.0, 10.0), (5.0, 10.0), (10.0, 10.0)]).unwrap();
        for t in [0.0, 2.5, 5.0, 9.9] {
            let (v, a) = lead_state_at(&c, t).unwrap();
            assert_relative_eq!(v, 10.0);
            assert_relative_eq!(a, 0.0);
        }
    }

    #[test]
    fn linear_ramp_interpolates() {
        let c = DriveCycle::new("ramp", vec![(0.0, 0.0), (10.0, 20.0)]).unwrap();
        let (v, a) = lead_state_at(&c, 5.0).unwrap();
        assert_relative_eq!(v, 10.0);
        assert_relative_eq!(a, 2.0);
    }

    #[test]
    fn sample_point_uses_central_difference() {
        let c = DriveCycle::new("knee", vec![(0.0, 0.0), (10.0, 20.0), (20.0, 20.0)]).unwrap();
        let (v, a) = lead_state_at(&c, 10.0).unwrap();
        assert_relative_eq!(v, 20.0);
        assert_relative_eq!(a, 1.0); // average of 2.0 and 0.0
    }

    #[test]
    fn out_of_range_errors() {
        let c = DriveCycle::new("short", vec![(0.0, 0.0), (1.0, 1.0)]).unwrap();
        assert!(matches!(
            lead_state_at(&c, 2.0),
            Err(DriverError::OutOfRange { .. })
        ));
        assert!(lead_state_at(&c, -0.1).is_err());
    }

    #[test]
    fn rejects_malformed_cycles() {
        assert!(DriveCycle::new("x", vec![(0.0, 1.0)]).is_err());
        assert!(DriveCycle::new("x", vec![(1.0, 1.0), (2.0, 1.0)]).is_err());
        assert!(DriveCycle::new("x", vec![(0.0, 1.0), (0.0, 2.0)]).is_err());
        assert!(DriveCycle::new("x", vec![(0.0, 1.0), (1.0, -2.0)]).is_err());
    }

    #[test]
    fn idm_balances_at_desired_speed() {
        let p = IdmParams::default();
        let state = SimState {
            host_speed_m_s: p.desired_speed_m_s,
            ..SimState::at_rest(1000.0)
        };
        assert_relative_eq!(idm_acceleration(&state, &p, false), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn idm_full_accel_from_rest_on_free_road() {
        let p = IdmParams::default();
        let state = SimState::at_rest(1000.0);
        assert_relative_eq!(idm_acceleration(&state, &p, false), p.max_accel_m_s2);
    }

    #[test]
    fn idm_equilibrium_gap_example() {
        // v = v_l = 15, z = s0 + 15 T: the gap term is exactly 1, leaving
        // a = -a_max (v/v0)^4 = -1.5 * 0.0625.
        let p = IdmParams::default();
        let state = SimState {
            separation_m: p.min_gap_m + 15.0 * p.time_headway_s,
            host_speed_m_s: 15.0,
            lead_speed_m_s: 15.0,
            ..SimState::at_rest(0.0)
        };
        assert_relative_eq!(
            idm_acceleration(&state, &p, true),
            -1.5 * 0.0625,
            epsilon = 1e-12
        );
    }

    #[test]
    fn idm_output_respects_clamp_and_continuity() {
        let p = IdmParams::default();
        // Tiny gap at speed: deeply negative, clamped.
        let state = SimState {
            separation_m: 1.0,
            host_speed_m_s: 20.0,
            lead_speed_m_s: 0.0,
            ..SimState::at_rest(0.0)
        };
        assert_relative_eq!(idm_acceleration(&state, &p, true), IDM_ACCEL_CLAMP.0);
        // Continuity over a fine gap sweep.
        let mut last = None;
        let mut z = 2.0;
        while z < 200.0 {
            let s = SimState {
                separation_m: z,
                host_speed_m_s: 10.0,
                lead_speed_m_s: 8.0,
                ..SimState::at_rest(0.0)
            };
            let a = idm_acceleration(&s, &p, true);
            if let Some(prev) = last {
                let diff: f64 = a - prev;
                assert!(diff.abs() < 0.2, "jump of {diff} at z {z}");
            }
            last = Some(a);
            z += 0.05;
        }
    }

    #[test]
    fn synthetic_cycles_are_deterministic() {
        let a = synthesize_cycle(CycleKind::Urban, 600.0, 3);
        let b = synthesize_cycle(CycleKind::Urban, 600.0, 3);
        assert_eq!(a, b);
        let c = synthesize_cycle(CycleKind::Urban, 600.0, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn urban_cycle_has_stops_and_speed_cap() {
        for seed in 0..5 {
            let c = synthesize_cycle(CycleKind::Urban, 600.0, seed);
            let stops = count_stops(&c);
            assert!(stops >= 4, "seed {seed}: only {stops} stops");
            assert!(c.samples.iter().all(|(_, v)| *v <= 25.0));
        }
    }

    fn count_stops(c: &DriveCycle) -> usize {
        let mut stops = 0;
        let mut moving = false;
        for &(_, v) in &c.samples {
            if v > 0.5 {
                moving = true;
            } else if moving && v == 0.0 {
                stops += 1;
                moving = false;
            }
        }
        stops
    }

    #[test]
    fn highway_cycle_speed_cap() {
        let c = synthesize_cycle(CycleKind::Highway, 600.0, 1);
        assert!(c.samples.iter().all(|(_, v)| *v <= 35.0));
        assert!(c.samples.iter().any(|(_, v)| *v > 20.0));
    }

    #[test]
    fn sawtooth_ramps_between_zero_and_fifteen() {
        let c = synthesize_cycle(CycleKind::Sawtooth, 100.0, 0);
        let (v, _) = lead_state_at(&c, 25.0).unwrap();
        assert_relative_eq!(v, 15.0);
        let (v, _) = lead_state_at(&c, 50.0).unwrap();
        assert_relative_eq!(v, 0.0);
        assert!(c.samples.iter().all(|(_, v)| (0.0..=15.0).contains(v)));
    }

    #[test]
    fn brake_events_reach_standstill() {
        let base = DriveCycle::new(
            "cruise",
            vec![(0.0, 15.0), (300.0, 15.0), (600.0, 15.0)],
        )
        .unwrap();
        let spliced = inject_brake_events(&base, 2, 2.0, 9);
        let stops = spliced.samples.iter().filter(|(_, v)| *v == 0.0).count();
        assert!(stops > 2, "expected dwell samples at zero speed");
        // braking slope is the configured decel
        let mut max_decel: f64 = 0.0;
        for w in spliced.samples.windows(2) {
            let a = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            max_decel = max_decel.max(-a);
        }
        assert_relative_eq!(max_decel, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn decel_clamp_respects_braking_bound() {
        let c = DriveCycle::new("drop", vec![(0.0, 10.0), (1.0, 6.0), (2.0, 6.0)]).unwrap();
        let limited = limit_cycle_decel(&c, 2.0);
        assert_relative_eq!(limited.samples[1].1, 8.0);
        assert_relative_eq!(limited.samples[2].1, 6.0);
        // A cycle already within the bound is untouched.
        let gentle = DriveCycle::new("gentle", vec![(0.0, 10.0), (1.0, 9.0)]).unwrap();
        assert_eq!(limit_cycle_decel(&gentle, 2.0), gentle);
    }

    #[test]
    fn zero_noise_returns_base_cycle() {
        let base = synthesize_cycle(CycleKind::Urban, 300.0, 1);
        let spec = RandomizationSpec {
            speed_noise_std_m_s: 0.0,
            ..Default::default()
        };
        let setup = randomize_episode(
            &spec,
            &base,
            0,
            &VehicleParams::default(),
            &IdmParams::default(),
            &SafetyConfig::default(),
        )
        .unwrap();
        assert_eq!(setup.cycle.samples, base.samples);
    }

    #[test]
    fn randomization_is_a_pure_function_of_seed_and_index() {
        let base = synthesize_cycle(CycleKind::Urban, 300.0, 1);
        let spec = RandomizationSpec::default();
        let args = (
            &base,
            7u64,
            &VehicleParams::default(),
            &IdmParams::default(),
            &SafetyConfig::default(),
        );
        let a = randomize_episode(&spec, args.0, args.1, args.2, args.3, args.4).unwrap();
        let b = randomize_episode(&spec, args.0, args.1, args.2, args.3, args.4).unwrap();
        assert_eq!(a, b);
        let c = randomize_episode(&spec, args.0, 8, args.2, args.3, args.4).unwrap();
        assert_ne!(a.init, c.init);
    }

    #[test]
    fn sampled_initial_states_are_barrier_admissible() {
        let base = synthesize_cycle(CycleKind::Urban, 300.0, 2);
        let spec = RandomizationSpec::default();
        let vehicle = VehicleParams::default();
        let idm = IdmParams::default();
        let cfg = SafetyConfig::default();
        let worst = SafetyConfig {
            lead_accel_mode: LeadAccelMode::WorstCase,
            ..cfg.clone()
        };
        for i in 0..100 {
            let setup = randomize_episode(&spec, &base, i, &vehicle, &idm, &cfg).unwrap();
            for kind in [FilterKind::Hocbf, FilterKind::Ecbf] {
                let b = safety::eval_barrier(&setup.init, 0.0, &setup.vehicle, &worst, kind);
                assert!(b.v0 >= 0.0 && b.v1 >= 0.0, "episode {i} inadmissible: {b:?}");
                let f = safety::filter_action(
                    setup.init.prev_wheel_torque_nm,
                    &setup.init,
                    0.0,
                    &setup.vehicle,
                    &worst,
                    kind,
                );
                assert!(!f.infeasible);
                assert!(f.barrier.v2_at(f.safe_torque_nm) >= -1e-9);
            }
        }
    }

    #[test]
    fn cycle_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cycle.csv");
        std::fs::write(&path, "time_s,speed_m_s\n0,0\n1,2.5\n2,5\n").unwrap();
        let c = DriveCycle::from_csv(&path).unwrap();
        assert_eq!(c.samples, vec![(0.0, 0.0), (1.0, 2.5), (2.0, 5.0)]);
        std::fs::write(&path, "time,speed\n0,0\n").unwrap();
        assert!(DriveCycle::from_csv(&path).is_err());
    }
}
