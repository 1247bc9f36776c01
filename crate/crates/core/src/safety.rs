//! Safe-set geometry and the barrier-based torque filter.
//!
//! Collision safety is `z - z0 >= 0`. The wheel-torque control enters only
//! the second derivative of that function, so the filter is built from the
//! recursive pair `v1 = d(v0)/dt + alpha1(v0)` and
//! `v2 = d(v1)/dt + alpha2(v1)` and enforces `v2 >= 0` by projecting the
//! proposed torque onto the half-line it defines.
//!
//! Two alpha1 shapes are provided: a two-region square-root profile matched
//! to the braking-capability geometry (the permissive filter) and the linear
//! exponential-CBF form used as the conservative comparison.
//!
//! Deceleration limits are stored as positive magnitudes throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{resistance_force, SimState, VehicleParams};

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("invalid safety config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Region1,
    Region2,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Region::Region1 => write!(f, "region1"),
            Region::Region2 => write!(f, "region2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Hocbf,
    Ecbf,
}

/// Which lead acceleration the barrier sees: the measured value from the
/// cycle, or the worst-case braking bound (used for certification runs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeadAccelMode {
    Measured,
    WorstCase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    /// Hard separation floor (m).
    pub z0_m: f64,
    /// Magnitude of the host's assumed maximum deceleration (m/s^2).
    pub a_host_max_m_s2: f64,
    /// Magnitude of the lead's maximum deceleration (m/s^2).
    pub a_lead_max_m_s2: f64,
    pub v_host_max_m_s: f64,
    /// Slope of the linear alpha2.
    pub alpha2_gain: f64,
    pub ecbf_k1: f64,
    pub ecbf_k2: f64,
    /// Gap floor for the alpha1 derivative near z = z0 (m).
    pub singularity_eps: f64,
    pub lead_accel_mode: LeadAccelMode,
    /// Beyond this separation the lead is out of radar and unconstrained.
    pub radar_range_m: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        SafetyConfig {
            z0_m: 2.0,
            a_host_max_m_s2: 2.27,
            a_lead_max_m_s2: 2.0,
            v_host_max_m_s: 40.0,
            alpha2_gain: 2.0,
            ecbf_k1: 0.08,
            ecbf_k2: 2.04,
            singularity_eps: 1e-3,
            lead_accel_mode: LeadAccelMode::Measured,
            radar_range_m: 150.0,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        let err = |m: &str| Err(SafetyError::InvalidConfig(m.into()));
        if !(self.z0_m >= 0.0) {
            return err("z0_m must be non-negative");
        }
        if !(self.a_host_max_m_s2 > 0.0 && self.a_lead_max_m_s2 > 0.0) {
            return err("deceleration magnitudes must be positive");
        }
        if !(self.v_host_max_m_s > 0.0) {
            return err("v_host_max_m_s must be positive");
        }
        if !(self.alpha2_gain > 0.0) {
            return err("alpha2_gain must be positive");
        }
        if !(self.singularity_eps > 0.0) {
            return err("singularity_eps must be positive");
        }
        if !(self.radar_range_m > 0.0) {
            return err("radar_range_m must be positive");
        }
        if !(self.ecbf_k1 > 0.0 && self.ecbf_k2 > 0.0) {
            return err("ecbf gains must be positive");
        }
        if self.ecbf_k2 * self.ecbf_k2 < 4.0 * self.ecbf_k1 {
            return err("ecbf gains must have real class-K decomposition (k2^2 >= 4 k1)");
        }
        Ok(())
    }

    /// Split (k1, k2) into the two linear class-K slopes whose composition
    /// reproduces the exponential-CBF condition: `c1 + gain = k2`,
    /// `c1 * gain = k1`, with `c1` the smaller root.
    pub fn ecbf_decomposition(&self) -> (f64, f64) {
        let disc = (self.ecbf_k2 * self.ecbf_k2 - 4.0 * self.ecbf_k1).max(0.0);
        let root = disc.sqrt();
        ((self.ecbf_k2 - root) / 2.0, (self.ecbf_k2 + root) / 2.0)
    }

    /// Switchover gap below which the region-2 limiting host speed is the
    /// interior stationary point rather than `v_host_max`. Diverges (always
    /// interior) only when the lead out-brakes the host.
    fn region2_interior_gap_limit(&self) -> f64 {
        let (a_h, a_l) = (self.a_host_max_m_s2, self.a_lead_max_m_s2);
        if a_h > a_l {
            (a_h - a_l) * self.v_host_max_m_s * self.v_host_max_m_s / (2.0 * a_h * a_h)
        } else {
            0.0
        }
    }

    /// Host speed at which the region-2 relative-velocity requirement is
    /// most restrictive for a given gap.
    pub fn region2_limiting_host_speed(&self, gap_m: f64) -> f64 {
        let g = gap_m.max(0.0);
        let (a_h, a_l) = (self.a_host_max_m_s2, self.a_lead_max_m_s2);
        if a_h > a_l {
            let stationary = (2.0 * a_h * a_h * g / (a_h - a_l)).sqrt();
            stationary.min(self.v_host_max_m_s)
        } else {
            self.v_host_max_m_s
        }
    }
}

/// Barrier components at a state. `v2` is affine in the wheel torque:
/// `v2(T) = v2_at_zero_torque + torque_coeff * T` with
/// `torque_coeff = -1/(m r_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierEval {
    pub v0: f64,
    pub v1: f64,
    pub v2_at_zero_torque: f64,
    pub torque_coeff: f64,
    pub region: Region,
}

impl BarrierEval {
    pub fn v2_at(&self, wheel_torque_nm: f64) -> f64 {
        self.v2_at_zero_torque + self.torque_coeff * wheel_torque_nm
    }

    /// Largest torque satisfying `v2 >= 0` (the coefficient is negative).
    pub fn torque_upper_bound_nm(&self) -> f64 {
        -self.v2_at_zero_torque / self.torque_coeff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub safe_torque_nm: f64,
    pub intervened: bool,
    pub infeasible: bool,
    pub barrier: BarrierEval,
}

/// Region 1 holds where the host's own stopping distance at maximum braking
/// fits inside the gap: `v_h^2 <= 2 a_h (z - z0)`. Boundary states are
/// region 1; negative gaps classify as region 2.
pub fn classify_region(state: &SimState, cfg: &SafetyConfig) -> Region {
    let gap = state.separation_m - cfg.z0_m;
    if gap >= 0.0
        && state.host_speed_m_s * state.host_speed_m_s <= 2.0 * cfg.a_host_max_m_s2 * gap
    {
        Region::Region1
    } else {
        Region::Region2
    }
}

/// Most negative admissible relative velocity (v_l - v_h) in region 1:
/// the lead may be stopped, so the host may close at its own stopping-
/// distance rate, `-sqrt(2 a_h gap)`.
pub fn limiting_rel_velocity_region1(gap_m: f64, cfg: &SafetyConfig) -> f64 {
    -(2.0 * cfg.a_host_max_m_s2 * gap_m.max(0.0)).sqrt()
}

/// Most negative admissible relative velocity in region 2.
///
/// The pointwise requirement at host speed `v` is
/// `v_l - v_h >= sqrt(max(0, (a_l/a_h) v^2 - 2 a_l gap)) - v`; the binding
/// value over the region-2 speed range is attained at
/// [`SafetyConfig::region2_limiting_host_speed`] (the stationary point
/// `v^2 = 2 a_h^2 gap / (a_h - a_l)` when it lies below `v_host_max`). On
/// the stationary branch this reduces to `-sqrt(2 (a_h - a_l) gap)`: the
/// host may only spend its braking-capability surplus over the lead.
pub fn limiting_rel_velocity_region2(gap_m: f64, cfg: &SafetyConfig) -> f64 {
    let g = gap_m.max(0.0);
    let v_lim = cfg.region2_limiting_host_speed(g);
    region2_pointwise_requirement(g, v_lim, cfg)
}

/// Relative-velocity requirement of the region-2 boundary at a specific
/// host speed (also the `min_lead_speed - v_h` of the safe-set grid).
pub fn region2_pointwise_requirement(gap_m: f64, v_h: f64, cfg: &SafetyConfig) -> f64 {
    min_lead_speed(gap_m, v_h, cfg) - v_h
}

/// Minimum lead speed that keeps (gap, v_h) safe under max braking by both:
/// zero in region 1, `sqrt((a_l/a_h) v_h^2 - 2 a_l gap)` in region 2.
pub fn min_lead_speed(gap_m: f64, v_h: f64, cfg: &SafetyConfig) -> f64 {
    let k = cfg.a_lead_max_m_s2 / cfg.a_host_max_m_s2;
    (k * v_h * v_h - 2.0 * cfg.a_lead_max_m_s2 * gap_m)
        .max(0.0)
        .sqrt()
}

/// alpha1 of the two-region profile (positive, zero at zero gap).
fn alpha1_two_region(gap_m: f64, region: Region, cfg: &SafetyConfig) -> f64 {
    match region {
        Region::Region1 => -limiting_rel_velocity_region1(gap_m, cfg),
        Region::Region2 => -limiting_rel_velocity_region2(gap_m, cfg),
    }
}

/// d(alpha1)/d(gap) of the two-region profile, with the square-root
/// singularity at zero gap floored at `singularity_eps`.
fn dalpha1_two_region(gap_m: f64, region: Region, cfg: &SafetyConfig) -> f64 {
    let g = gap_m.max(cfg.singularity_eps);
    let (a_h, a_l) = (cfg.a_host_max_m_s2, cfg.a_lead_max_m_s2);
    match region {
        Region::Region1 => (a_h / (2.0 * g)).sqrt(),
        Region::Region2 => {
            if a_h > a_l && g <= cfg.region2_interior_gap_limit() {
                ((a_h - a_l) / (2.0 * g)).sqrt()
            } else {
                let v_max = cfg.v_host_max_m_s;
                let arg = a_l / a_h * v_max * v_max - 2.0 * a_l * g;
                if arg <= 0.0 {
                    // Region 2 is empty below v_host_max here; alpha1 has
                    // saturated at v_host_max.
                    0.0
                } else {
                    a_l / arg.max(2.0 * a_l * cfg.singularity_eps).sqrt()
                }
            }
        }
    }
}

/// Evaluate the barrier family at a state.
///
/// For the two-region filter, `v1 = (v_l - v_h) + alpha1(gap)` with the
/// region-matched alpha1, and
/// `v2(T) = a_l + F_r/m - T/(m r_w) + alpha1'(gap) (v_l - v_h) + alpha2_gain v1`.
/// For the exponential filter,
/// `v2(T) = a_l + F_r/m - T/(m r_w) + k1 (z - z0) + k2 (v_l - v_h)`.
pub fn eval_barrier(
    state: &SimState,
    lead_accel_m_s2: f64,
    params: &VehicleParams,
    cfg: &SafetyConfig,
    kind: FilterKind,
) -> BarrierEval {
    let gap = state.separation_m - cfg.z0_m;
    let rel = state.lead_speed_m_s - state.host_speed_m_s;
    let region = classify_region(state, cfg);
    let a_l = effective_lead_accel(lead_accel_m_s2, cfg);
    let drift = a_l + resistance_force(state, params) / params.mass_kg;
    let torque_coeff = -1.0 / (params.mass_kg * params.wheel_radius_m);

    match kind {
        FilterKind::Hocbf => {
            let v1 = rel + alpha1_two_region(gap, region, cfg);
            let v2_zero = drift + dalpha1_two_region(gap, region, cfg) * rel
                + cfg.alpha2_gain * v1;
            BarrierEval {
                v0: gap,
                v1,
                v2_at_zero_torque: v2_zero,
                torque_coeff,
                region,
            }
        }
        FilterKind::Ecbf => {
            let (c1, _) = cfg.ecbf_decomposition();
            let v1 = rel + c1 * gap;
            let v2_zero = drift + cfg.ecbf_k1 * gap + cfg.ecbf_k2 * rel;
            BarrierEval {
                v0: gap,
                v1,
                v2_at_zero_torque: v2_zero,
                torque_coeff,
                region,
            }
        }
    }
}

/// Barrier with an explicit linear alpha1 slope and alpha2 gain, composed
/// through the same machinery as the two-region filter. Composing the
/// exponential filter's root decomposition here must reproduce its `v2`.
pub fn eval_barrier_linear_alpha1(
    state: &SimState,
    lead_accel_m_s2: f64,
    params: &VehicleParams,
    cfg: &SafetyConfig,
    alpha1_slope: f64,
    alpha2_gain: f64,
) -> BarrierEval {
    let gap = state.separation_m - cfg.z0_m;
    let rel = state.lead_speed_m_s - state.host_speed_m_s;
    let a_l = effective_lead_accel(lead_accel_m_s2, cfg);
    let drift = a_l + resistance_force(state, params) / params.mass_kg;
    let v1 = rel + alpha1_slope * gap;
    let v2_zero = drift + alpha1_slope * rel + alpha2_gain * v1;
    BarrierEval {
        v0: gap,
        v1,
        v2_at_zero_torque: v2_zero,
        torque_coeff: -1.0 / (params.mass_kg * params.wheel_radius_m),
        region: classify_region(state, cfg),
    }
}

fn effective_lead_accel(measured: f64, cfg: &SafetyConfig) -> f64 {
    match cfg.lead_accel_mode {
        LeadAccelMode::Measured => measured,
        LeadAccelMode::WorstCase => -cfg.a_lead_max_m_s2,
    }
}

/// Project a proposed wheel torque onto the safe action set.
///
/// The projection QP has one scalar variable and one affine constraint, so
/// the exact solution is `min(proposed, T_ub)` with
/// `T_ub = m r_w * v2_at_zero_torque`, clamped afterwards to the actuator
/// range of the current gear. `infeasible` flags `T_ub` below the braking
/// limit, in which case maximum braking is returned. A lead beyond radar
/// range leaves the proposal unconstrained (actuator clamp only).
pub fn filter_action(
    proposed_torque_nm: f64,
    state: &SimState,
    lead_accel_m_s2: f64,
    params: &VehicleParams,
    cfg: &SafetyConfig,
    kind: FilterKind,
) -> FilterResult {
    let barrier = eval_barrier(state, lead_accel_m_s2, params, cfg, kind);
    let lo = -params.max_brake_torque_nm;
    let hi = params.deliverable_upper_nm(state.host_speed_m_s, state.gear_index);

    let (safe, infeasible) = if state.separation_m > cfg.radar_range_m {
        (proposed_torque_nm.clamp(lo, hi.max(lo)), false)
    } else {
        let t_ub = barrier.torque_upper_bound_nm();
        if t_ub < lo {
            (lo, true)
        } else {
            (proposed_torque_nm.min(t_ub).clamp(lo, hi.max(lo)), false)
        }
    };

    FilterResult {
        safe_torque_nm: safe,
        intervened: (safe - proposed_torque_nm).abs() > 1e-9,
        infeasible,
        barrier,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeSetCell {
    pub z_m: f64,
    pub v_h_m_s: f64,
    pub region: Region,
    pub min_lead_speed_m_s: f64,
    pub possible_safe: bool,
}

/// Tabulate the safe-set geometry over a (z, v_h) grid for export.
pub fn safe_set_grid(
    cfg: &SafetyConfig,
    z_range: (f64, f64),
    v_h_range: (f64, f64),
    resolution: usize,
) -> Vec<SafeSetCell> {
    assert!(resolution > 0, "resolution must be positive");
    assert!(z_range.1 >= z_range.0 && v_h_range.1 >= v_h_range.0);
    let coord = |lo: f64, hi: f64, i: usize| {
        if resolution == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut cells = Vec::with_capacity(resolution * resolution);
    for iz in 0..resolution {
        let z = coord(z_range.0, z_range.1, iz);
        for iv in 0..resolution {
            let v_h = coord(v_h_range.0, v_h_range.1, iv);
            let state = SimState {
                separation_m: z,
                host_speed_m_s: v_h,
                ..SimState::at_rest(z)
            };
            let region = classify_region(&state, cfg);
            let gap = z - cfg.z0_m;
            let min_lead = match region {
                Region::Region1 => 0.0,
                Region::Region2 => min_lead_speed(gap, v_h, cfg),
            };
            cells.push(SafeSetCell {
                z_m: z,
                v_h_m_s: v_h,
                region,
                min_lead_speed_m_s: min_lead,
                possible_safe: gap >= 0.0,
            });
        }
    }
    cells
}

/// Independent rollout oracle for the safe-set geometry: both vehicles brake
/// at their maximum rates to rest; the pair is safe iff the separation never
/// drops below z0. Use `dt <= 0.01` for trustworthy answers.
pub fn brute_force_safe(z: f64, v_h: f64, v_l: f64, cfg: &SafetyConfig, dt: f64) -> bool {
    debug_assert!(dt > 0.0 && dt <= 0.01, "oracle fidelity needs dt <= 0.01");
    let mut z = z;
    let mut vh = v_h;
    let mut vl = v_l;
    loop {
        if z < cfg.z0_m {
            return false;
        }
        if vh <= 0.0 && vl <= 0.0 {
            return true;
        }
        z += dt * (vl - vh);
        vh = (vh - dt * cfg.a_host_max_m_s2).max(0.0);
        vl = (vl - dt * cfg.a_lead_max_m_s2).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(z: f64, v_h: f64, v_l: f64) -> SimState {
        SimState {
            separation_m: z,
            host_speed_m_s: v_h,
            lead_speed_m_s: v_l,
            gear_index: 5,
            grade_rad: 0.0,
            prev_wheel_torque_nm: 0.0,
            time_s: 0.0,
        }
    }

    fn cfg() -> SafetyConfig {
        SafetyConfig::default()
    }

    #[test]
    fn region_classification_matches_stopping_distance() {
        let c = cfg();
        // stopping distance 100 / 4.54 = 22.03 <= 30
        assert_eq!(classify_region(&state(32.0, 10.0, 0.0), &c), Region::Region1);
        // 400 / 4.54 = 88.1 > 30
        assert_eq!(classify_region(&state(32.0, 20.0, 0.0), &c), Region::Region2);
        // zero-speed boundary
        assert_eq!(classify_region(&state(2.0, 0.0, 0.0), &c), Region::Region1);
        // negative gap classifies region 2 by convention
        assert_eq!(classify_region(&state(1.0, 0.0, 0.0), &c), Region::Region2);
    }

    #[test]
    fn region1_limit_is_stopping_distance_inverse() {
        let c = cfg();
        assert_relative_eq!(limiting_rel_velocity_region1(0.0, &c), 0.0);
        assert_relative_eq!(
            limiting_rel_velocity_region1(22.03, &c),
            -(2.0_f64 * 2.27 * 22.03).sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(limiting_rel_velocity_region1(50.0, &c), -15.0665, epsilon = 1e-4);
    }

    #[test]
    fn region2_limit_zero_gap_is_zero() {
        let c = cfg();
        assert_relative_eq!(limiting_rel_velocity_region2(0.0, &c), 0.0);
        let equal = SafetyConfig {
            a_lead_max_m_s2: 2.27,
            ..cfg()
        };
        assert_relative_eq!(limiting_rel_velocity_region2(0.0, &equal), 0.0);
    }

    #[test]
    fn region2_limit_interior_closed_form() {
        // On the stationary branch the limit collapses to the braking-
        // surplus form -sqrt(2 (a_h - a_l) gap).
        let c = cfg();
        let switch = c.region2_interior_gap_limit();
        assert_relative_eq!(switch, 0.27 * 1600.0 / (2.0 * 2.27 * 2.27), epsilon = 1e-12);
        for &g in &[0.5, 2.0, 10.0, 30.0, switch * 0.999] {
            assert_relative_eq!(
                limiting_rel_velocity_region2(g, &c),
                -(2.0 * (2.27 - 2.0) * g).sqrt(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn region2_limit_matches_grid_search_oracle() {
        // Grid-search the binding requirement over the region-2 host-speed
        // range, step 0.001, and compare with the closed form.
        let c = cfg();
        for &g in &[0.0, 1.0, 5.0, 20.0, 41.0, 60.0, 120.0, 300.0] {
            let v_start = (2.0 * c.a_host_max_m_s2 * g).sqrt().min(c.v_host_max_m_s);
            let mut worst = f64::NEG_INFINITY;
            let mut v = v_start;
            while v <= c.v_host_max_m_s + 1e-12 {
                worst = worst.max(region2_pointwise_requirement(g, v, &c));
                v += 0.001;
            }
            worst = worst.max(region2_pointwise_requirement(g, c.v_host_max_m_s, &c));
            assert_relative_eq!(
                limiting_rel_velocity_region2(g, &c),
                worst,
                epsilon = 1e-4
            );
        }
    }

    #[test]
    fn region2_is_more_restrictive_than_region1() {
        let c = cfg();
        let mut g = 0.0;
        while g <= 400.0 {
            let r1 = limiting_rel_velocity_region1(g, &c);
            let r2 = limiting_rel_velocity_region2(g, &c);
            assert!(
                r2 >= r1 - 1e-12,
                "ordering violated at gap {g}: r2 {r2} < r1 {r1}"
            );
            g += 0.25;
        }
    }

    #[test]
    fn min_lead_speed_examples() {
        let c = cfg();
        // Region-1 cell: zero is enough.
        assert_relative_eq!(min_lead_speed(30.0, 10.0, &c), 0.0);
        // Region-2 cell (gap 30, v_h 20): final-gap balance
        // sqrt(0.8811 * 400 - 4 * 30) = sqrt(232.4).
        let expect = (2.0 / 2.27 * 400.0 - 4.0 * 30.0_f64).sqrt();
        assert_relative_eq!(min_lead_speed(30.0, 20.0, &c), expect, epsilon = 1e-12);
        // And that boundary is exact against the rollout oracle.
        assert!(brute_force_safe(32.0, 20.0, expect + 0.05, &c, 0.005));
        assert!(!brute_force_safe(32.0, 20.0, expect - 0.3, &c, 0.005));
    }

    #[test]
    fn barrier_vanishes_at_stationary_boundary() {
        let c = cfg();
        let params = VehicleParams::default();
        let b = eval_barrier(&state(2.0, 0.0, 0.0), 0.0, &params, &c, FilterKind::Hocbf);
        assert_relative_eq!(b.v0, 0.0);
        assert_relative_eq!(b.v1, 0.0);
    }

    #[test]
    fn barrier_v1_zero_on_region1_curve() {
        let c = cfg();
        let params = VehicleParams::default();
        let gap: f64 = 22.03;
        let v_h = (2.0 * 2.27 * gap).sqrt();
        let b = eval_barrier(
            &state(gap + 2.0, v_h, 0.0),
            0.0,
            &params,
            &c,
            FilterKind::Hocbf,
        );
        assert_eq!(b.region, Region::Region1);
        assert_relative_eq!(b.v1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ecbf_reduces_to_position_term_when_motion_cancels() {
        let c = cfg();
        let params = VehicleParams::default();
        let s = state(12.0, 15.0, 15.0);
        let torque = resistance_force(&s, &params) * params.wheel_radius_m;
        let b = eval_barrier(&s, 0.0, &params, &c, FilterKind::Ecbf);
        assert_relative_eq!(b.v2_at(torque), c.ecbf_k1 * 10.0, epsilon = 1e-9);
    }

    #[test]
    fn barrier_is_affine_in_torque() {
        let c = cfg();
        let params = VehicleParams::default();
        let b = eval_barrier(&state(40.0, 18.0, 12.0), -1.0, &params, &c, FilterKind::Hocbf);
        assert_relative_eq!(
            b.torque_coeff,
            -1.0 / (params.mass_kg * params.wheel_radius_m)
        );
        let t = 1234.5;
        assert_relative_eq!(
            b.v2_at(t),
            b.v2_at_zero_torque + b.torque_coeff * t,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ecbf_equals_composed_linear_alpha1() {
        let c = cfg();
        let params = VehicleParams::default();
        let (c1, gain) = c.ecbf_decomposition();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = state(
                rng.random_range(2.0..150.0),
                rng.random_range(0.0..40.0),
                rng.random_range(0.0..40.0),
            );
            let direct = eval_barrier(&s, -0.5, &params, &c, FilterKind::Ecbf);
            let composed = eval_barrier_linear_alpha1(&s, -0.5, &params, &c, c1, gain);
            assert!(
                (direct.v2_at_zero_torque - composed.v2_at_zero_torque).abs() < 1e-12,
                "ecbf decomposition mismatch: {} vs {}",
                direct.v2_at_zero_torque,
                composed.v2_at_zero_torque
            );
            assert!((direct.v1 - composed.v1).abs() < 1e-12);
        }
    }

    #[test]
    fn region1_never_less_permissive_than_region2_formula() {
        let c = cfg();
        let params = VehicleParams::default();
        let mut g = 0.0;
        while g <= 360.0 {
            let v_cap = (2.0 * c.a_host_max_m_s2 * g).sqrt().min(c.v_host_max_m_s);
            for frac in [0.0, 0.3, 0.7, 1.0] {
                let v_h = v_cap * frac;
                let s = state(g + c.z0_m, v_h, 0.0);
                if classify_region(&s, &c) != Region::Region1 {
                    continue;
                }
                let b1 = eval_barrier(&s, 0.0, &params, &c, FilterKind::Hocbf);
                let v1_region2 = (s.lead_speed_m_s - s.host_speed_m_s)
                    - limiting_rel_velocity_region2(g, &c);
                assert!(
                    b1.v1 >= v1_region2 - 1e-12,
                    "region-1 v1 {} below region-2 v1 {} at gap {g}, v_h {v_h}",
                    b1.v1,
                    v1_region2
                );
            }
            g += 0.5;
        }
    }

    #[test]
    fn filter_passes_safe_proposals_through() {
        let c = cfg();
        let params = VehicleParams::default();
        let s = state(80.0, 10.0, 12.0);
        let r = filter_action(500.0, &s, 0.0, &params, &c, FilterKind::Hocbf);
        assert!(!r.intervened);
        assert!(!r.infeasible);
        assert_eq!(r.safe_torque_nm, 500.0);
    }

    #[test]
    fn filter_binding_case_returns_upper_bound() {
        let c = cfg();
        let params = VehicleParams::default();
        // Close and fast: the constraint binds but is feasible.
        let s = state(12.0, 12.0, 8.0);
        let r = filter_action(4000.0, &s, 0.0, &params, &c, FilterKind::Hocbf);
        assert!(r.intervened);
        if !r.infeasible {
            assert_relative_eq!(
                r.safe_torque_nm,
                r.barrier.torque_upper_bound_nm().clamp(
                    -params.max_brake_torque_nm,
                    params.deliverable_upper_nm(s.host_speed_m_s, s.gear_index)
                ),
                epsilon = 1e-9
            );
            assert!(r.barrier.v2_at(r.safe_torque_nm) >= -1e-9);
        }
    }

    #[test]
    fn filter_flags_infeasible_and_max_brakes() {
        let c = cfg();
        let params = VehicleParams::default();
        // Deep violation: almost no gap, huge closing speed.
        let s = state(2.5, 35.0, 0.0);
        let r = filter_action(2000.0, &s, 0.0, &params, &c, FilterKind::Hocbf);
        assert!(r.infeasible);
        assert_eq!(r.safe_torque_nm, -params.max_brake_torque_nm);
    }

    #[test]
    fn filter_ignores_lead_beyond_radar() {
        let c = cfg();
        let params = VehicleParams::default();
        let mut s = state(200.0, 30.0, 0.0);
        s.gear_index = params.top_gear();
        let r = filter_action(1000.0, &s, 0.0, &params, &c, FilterKind::Hocbf);
        assert!(!r.intervened);
        assert_eq!(r.safe_torque_nm, 1000.0);
    }

    #[test]
    fn filter_matches_numeric_projection_oracle() {
        // Bisection on v2(T) >= 0 plus box clamping, never using the
        // closed-form inversion.
        let c = cfg();
        let params = VehicleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for kind in [FilterKind::Hocbf, FilterKind::Ecbf] {
            for _ in 0..300 {
                let s = state(
                    rng.random_range(2.0..140.0),
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..40.0),
                );
                let a_l = rng.random_range(-2.0..1.0);
                let proposed = rng.random_range(-20_000.0..20_000.0);
                let got = filter_action(proposed, &s, a_l, &params, &c, kind);
                let expect = numeric_projection(proposed, &s, a_l, &params, &c, kind);
                assert!(
                    (got.safe_torque_nm - expect).abs() < 1e-6,
                    "kind {kind:?}: filter {} vs oracle {expect}",
                    got.safe_torque_nm
                );
            }
        }
    }

    fn numeric_projection(
        proposed: f64,
        s: &SimState,
        a_l: f64,
        params: &VehicleParams,
        c: &SafetyConfig,
        kind: FilterKind,
    ) -> f64 {
        let b = eval_barrier(s, a_l, params, c, kind);
        let lo = -params.max_brake_torque_nm;
        let hi = params.deliverable_upper_nm(s.host_speed_m_s, s.gear_index);
        if s.separation_m > c.radar_range_m {
            return proposed.clamp(lo, hi.max(lo));
        }
        if b.v2_at(lo) < 0.0 {
            return lo;
        }
        // v2 is non-increasing in T; bisect for the feasibility edge.
        let mut a = lo;
        let mut bmax = 1.0e7;
        for _ in 0..200 {
            let mid = 0.5 * (a + bmax);
            if b.v2_at(mid) >= 0.0 {
                a = mid;
            } else {
                bmax = mid;
            }
        }
        proposed.min(a).clamp(lo, hi.max(lo))
    }

    #[test]
    fn torque_bound_monotone_in_gap_for_closing_states() {
        let c = cfg();
        let params = VehicleParams::default();
        for kind in [FilterKind::Hocbf, FilterKind::Ecbf] {
            for (v_h, v_l) in [(10.0, 0.0), (20.0, 12.0), (30.0, 30.0), (5.0, 2.0)] {
                let mut last = f64::NEG_INFINITY;
                let mut z = c.z0_m;
                while z <= 150.0 {
                    let b = eval_barrier(&state(z, v_h, v_l), 0.0, &params, &c, kind);
                    let t_ub = b.torque_upper_bound_nm();
                    assert!(
                        t_ub >= last - 1e-9,
                        "{kind:?} upper bound decreased at z {z} ({t_ub} < {last})"
                    );
                    last = t_ub;
                    z += 0.5;
                }
            }
        }
    }

    #[test]
    fn brute_force_oracle_trivial_cases() {
        let c = cfg();
        assert!(brute_force_safe(10_000.0, 0.0, 0.0, &c, 0.005));
        // At the floor with the host closing, the gap shrinks immediately.
        assert!(!brute_force_safe(2.0, 5.0, 1.0, &c, 0.005));
    }

    #[test]
    fn grid_against_brute_force_sample() {
        let c = cfg();
        let cells = safe_set_grid(&c, (c.z0_m, 102.0), (0.0, 40.0), 25);
        let mut agree = 0;
        let mut total = 0;
        for cell in &cells {
            let analytic_region1 = cell.region == Region::Region1;
            let oracle_safe_with_stopped_lead =
                brute_force_safe(cell.z_m, cell.v_h_m_s, 0.0, &c, 0.005);
            total += 1;
            if analytic_region1 == oracle_safe_with_stopped_lead {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn grid_cells_match_examples() {
        let c = cfg();
        let cells = safe_set_grid(&c, (32.0, 32.0), (10.0, 20.0), 2);
        assert_eq!(cells[0].region, Region::Region1);
        assert_relative_eq!(cells[0].min_lead_speed_m_s, 0.0);
        assert!(cells[0].possible_safe);
        assert_eq!(cells[1].region, Region::Region2);
        assert_relative_eq!(
            cells[1].min_lead_speed_m_s,
            (2.0 / 2.27 * 400.0 - 4.0 * 30.0_f64).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn config_validation_rejects_bad_gains() {
        let mut c = cfg();
        c.ecbf_k1 = 5.0;
        c.ecbf_k2 = 1.0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
