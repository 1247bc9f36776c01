//! Experiment orchestration: the per-step loop wiring driver -> controller
//! -> safety filter -> dynamics, episode metrics, the training loop, the
//! baseline-vs-RL evaluation and all file outputs.
//!
//! Every run is a pure function of its config (seeds included): episodes are
//! randomized per index, workers reduce in index order, and no output embeds
//! wall-clock state, so identical configs produce byte-identical outputs.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ControllerKind, ExperimentConfig};
use crate::controllers::{
    baseline_action, policy_mean_action, policy_sample, HybridAction, PolicyParams, PolicyState,
    RewardInputs, RewardTerms, TorqueBounds,
};
use crate::driver::{self, DriverError, EpisodeSetup};
use crate::dynamics::{self, DynamicsError, SimState};
use crate::safety::{self, FilterKind};
use crate::trainer::{Segment, TrainError, Trainer, TrainerConfig, Transition};

pub const MILE_M: f64 = 1609.344;
pub const US_GALLON_L: f64 = 3.785411784;
pub const DIESEL_DENSITY_KG_PER_L: f64 = 0.85;
/// A step counts as a crash when separation drops below z0 by more than
/// this discretization tolerance.
pub const CRASH_TOLERANCE_M: f64 = 0.01;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("rl controller requires a policy (checkpoint or seeded init)")]
    MissingPolicy,
    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("reading checkpoint {path}: {0}", path = .1)]
    Checkpoint(String, String),
}

/// Per-episode summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_index: u64,
    pub steps: u64,
    /// Steps with separation below z0 - 0.01 m.
    pub crash_count: u64,
    pub min_gap_m: f64,
    pub fuel_g: f64,
    pub distance_m: f64,
    pub mpg: f64,
    /// RMS of achieved minus desired acceleration.
    pub a_rms_m_s2: f64,
    /// Mean of the four reward terms [accel, fuel, torque, gear].
    pub mean_reward_terms: [f64; 4],
    pub mean_reward: f64,
    pub intervention_rate: f64,
    pub infeasible_steps: u64,
    /// Mean positive closing speed (v_h - v_l)+.
    pub mean_approach_rate_m_s: f64,
}

/// One trace row per simulation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub time_s: f64,
    pub z_m: f64,
    pub v_h_m_s: f64,
    pub v_l_m_s: f64,
    pub gear: usize,
    pub torque_proposed_nm: f64,
    pub torque_applied_nm: f64,
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
    pub r_accel: f64,
    pub r_fuel: f64,
    pub r_torque: f64,
    pub r_gear: f64,
    pub a_des_m_s2: f64,
    pub a_m_s2: f64,
    pub fuel_rate_g_s: f64,
}

/// Controller dispatch for an episode.
pub enum Controller<'a> {
    Rl {
        policy: &'a PolicyParams,
        /// Mean action (evaluation) instead of sampling.
        deterministic: bool,
    },
    Baseline,
    /// Proposes maximum torque every step and shifts up near redline.
    Adversarial,
}

/// Everything produced by one step of the closed loop.
pub struct StepRecord {
    pub features: PolicyState,
    pub sampled: Option<crate::controllers::SampledAction>,
    pub reward: RewardTerms,
    pub row: TraceRow,
    pub state_after: SimState,
    pub intervened: bool,
    pub infeasible: bool,
}

/// Stateful episode simulation (Fig. 3 loop): per step the driver model
/// requests an acceleration, the controller proposes (torque, gear change),
/// the filter projects the torque, the gear change applies, and the
/// environment integrates one dt.
pub struct EpisodeSim<'a> {
    cfg: &'a ExperimentConfig,
    pub setup: EpisodeSetup,
    /// The baseline's calibration-point vehicle: nominal mass, true specs.
    nominal_vehicle: crate::dynamics::VehicleParams,
    pub state: SimState,
    prev_accel: f64,
    action_rng: ChaCha8Rng,
    out_of_radar_s: f64,
    steps_total: usize,
    step_idx: usize,
}

impl<'a> EpisodeSim<'a> {
    pub fn new(cfg: &'a ExperimentConfig, episode_index: u64) -> Result<Self, HarnessError> {
        let base = cfg.cycle.build_base()?;
        let mut setup = driver::randomize_episode(
            &cfg.driver.randomization,
            &base,
            episode_index,
            &cfg.vehicle,
            &cfg.driver.idm,
            &cfg.safety,
        )?;
        if cfg.cycle.brake_events > 0 {
            setup.cycle = driver::inject_brake_events(
                &setup.cycle,
                cfg.cycle.brake_events,
                cfg.safety.a_lead_max_m_s2,
                cfg.run.seed ^ episode_index.wrapping_mul(0x9e37_79b9),
            );
        }
        setup.cycle = driver::limit_cycle_decel(&setup.cycle, cfg.safety.a_lead_max_m_s2);
        let horizon = cfg.episode_length_s().min(setup.cycle.duration_s());
        let steps_total = (horizon / cfg.run.dt_s).floor() as usize;
        let mut seed_bytes = [0u8; 32];
        seed_bytes[..8].copy_from_slice(&cfg.run.seed.to_le_bytes());
        seed_bytes[8..16].copy_from_slice(&episode_index.to_le_bytes());
        seed_bytes[16] = 0xac;
        let state = setup.init;
        let mut nominal_vehicle = cfg.vehicle.clone();
        nominal_vehicle.mass_kg = cfg.run.baseline_nominal_mass_kg;
        Ok(EpisodeSim {
            cfg,
            setup,
            nominal_vehicle,
            state,
            prev_accel: 0.0,
            action_rng: ChaCha8Rng::from_seed(seed_bytes),
            out_of_radar_s: 0.0,
            steps_total,
            step_idx: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.step_idx >= self.steps_total
            || self.out_of_radar_s > self.cfg.run.out_of_radar_timeout_s
    }

    pub fn step(&mut self, controller: &Controller) -> Result<StepRecord, HarnessError> {
        debug_assert!(!self.done());
        let cfg = self.cfg;
        let dt = cfg.run.dt_s;
        let vehicle = &self.setup.vehicle;
        let t = self.state.time_s;

        // Lead playback: the finite-difference acceleration drives both the
        // integrator (reproducing the cycle exactly) and the measured-mode
        // barrier. Accumulated time can overshoot the cycle end by a few
        // ulps; clamp the lookup.
        let t_next = (t + dt).min(self.setup.cycle.duration_s());
        let (v_l_next, _) = driver::lead_state_at(&self.setup.cycle, t_next)?;
        let lead_accel = (v_l_next - self.state.lead_speed_m_s) / dt;

        let in_radar = self.state.separation_m <= cfg.safety.radar_range_m;
        let a_des = driver::idm_acceleration(&self.state, &self.setup.idm, in_radar);

        let norm = match controller {
            Controller::Rl { policy, .. } => policy.norm.clone(),
            _ => Default::default(),
        };
        let features = PolicyState::from_sim(
            &self.state,
            a_des,
            self.prev_accel,
            in_radar,
            cfg.safety.radar_range_m,
            vehicle,
            &norm,
        );

        let mut sampled = None;
        let action: HybridAction = match controller {
            Controller::Rl {
                policy,
                deterministic,
            } => {
                let bounds = TorqueBounds::at(&self.state, vehicle);
                if *deterministic {
                    policy_mean_action(policy, &features, bounds)
                } else {
                    let s = policy_sample(policy, &features, bounds, &mut self.action_rng);
                    sampled = Some(s);
                    s.action
                }
            }
            // The baseline runs on its nominal calibration, not the
            // episode's randomized loading.
            Controller::Baseline => baseline_action(&self.state, a_des, &self.nominal_vehicle),
            Controller::Adversarial => {
                let rpm = vehicle.engine_speed_rpm(self.state.host_speed_m_s, self.state.gear_index);
                let gear_delta = if rpm > 0.8 * vehicle.engine_speed_range_rpm.1 {
                    1
                } else {
                    0
                };
                HybridAction {
                    torque_proposal_nm: vehicle.max_wheel_torque_any_gear_nm(),
                    gear_delta,
                }
            }
        };

        // Project the torque before this step's gear change applies; gear
        // changes are never filtered.
        let (applied_pre_gear, intervened, infeasible, barrier) = match cfg.run.filter.kind() {
            Some(kind) => {
                let r = safety::filter_action(
                    action.torque_proposal_nm,
                    &self.state,
                    lead_accel,
                    vehicle,
                    &cfg.safety,
                    kind,
                );
                (r.safe_torque_nm, r.intervened, r.infeasible, r.barrier)
            }
            None => {
                let clamped = vehicle.clamp_wheel_torque(
                    action.torque_proposal_nm,
                    self.state.host_speed_m_s,
                    self.state.gear_index,
                );
                // Unfiltered runs still log the permissive barrier for the
                // trace columns.
                let b = safety::eval_barrier(
                    &self.state,
                    lead_accel,
                    vehicle,
                    &cfg.safety,
                    FilterKind::Hocbf,
                );
                (clamped, false, false, b)
            }
        };

        let prev_applied = self.state.prev_wheel_torque_nm;
        let mut shifted = dynamics::apply_gear_change(&self.state, action.gear_delta, vehicle);
        // AMT engine protection (one step per decision): force an upshift at
        // or above redline, a downshift when lugging below the minimum
        // engine speed. Keeps the transmission in launch gears at stops.
        let rpm = vehicle.engine_speed_rpm(shifted.host_speed_m_s, shifted.gear_index);
        if rpm >= vehicle.engine_speed_range_rpm.1 && shifted.gear_index < vehicle.top_gear() {
            shifted.gear_index += 1;
        } else if rpm < vehicle.engine_speed_range_rpm.0 && shifted.gear_index > 0 {
            shifted.gear_index -= 1;
        }
        let gear_delta_realized = shifted.gear_index as i64 - self.state.gear_index as i64;
        // The realized gear's actuator envelope caps the torque (an upshift
        // can only lower the cap, which raises v2: still safe).
        let applied = vehicle.clamp_wheel_torque(
            applied_pre_gear,
            shifted.host_speed_m_s,
            shifted.gear_index,
        );

        let point = dynamics::powertrain_point_unchecked(&shifted, applied, vehicle);
        let next = dynamics::step(&shifted, applied, lead_accel, dt, vehicle)?;
        let a_actual = (next.host_speed_m_s - self.state.host_speed_m_s) / dt;

        let reward = crate::controllers::reward(
            &RewardInputs {
                accel_m_s2: a_actual,
                accel_desired_m_s2: a_des,
                fuel_rate_g_s: point.fuel_rate_g_s,
                torque_delta_nm: applied - prev_applied,
                gear_delta_realized: gear_delta_realized as i32,
            },
            &cfg.reward,
        );

        let row = TraceRow {
            time_s: t,
            z_m: self.state.separation_m,
            v_h_m_s: self.state.host_speed_m_s,
            v_l_m_s: self.state.lead_speed_m_s,
            gear: shifted.gear_index,
            torque_proposed_nm: action.torque_proposal_nm,
            torque_applied_nm: applied,
            v0: barrier.v0,
            v1: barrier.v1,
            v2: barrier.v2_at(applied),
            r_accel: reward.accel,
            r_fuel: reward.fuel,
            r_torque: reward.torque,
            r_gear: reward.gear,
            a_des_m_s2: a_des,
            a_m_s2: a_actual,
            fuel_rate_g_s: point.fuel_rate_g_s,
        };
        let record = StepRecord {
            features,
            sampled,
            reward,
            row,
            state_after: next,
            intervened,
            infeasible,
        };

        self.out_of_radar_s = if in_radar {
            0.0
        } else {
            self.out_of_radar_s + dt
        };
        self.prev_accel = a_actual;
        self.state = next;
        self.step_idx += 1;
        Ok(record)
    }
}

struct MetricsAccumulator {
    episode_index: u64,
    steps: u64,
    crash_count: u64,
    min_gap_m: f64,
    fuel_g: f64,
    distance_m: f64,
    sq_accel_err: f64,
    sum_terms: [f64; 4],
    interventions: u64,
    infeasible_steps: u64,
    sum_approach: f64,
}

impl MetricsAccumulator {
    fn new(episode_index: u64, init: &SimState) -> Self {
        MetricsAccumulator {
            episode_index,
            steps: 0,
            crash_count: 0,
            min_gap_m: init.separation_m,
            fuel_g: 0.0,
            distance_m: 0.0,
            sq_accel_err: 0.0,
            sum_terms: [0.0; 4],
            interventions: 0,
            infeasible_steps: 0,
            sum_approach: 0.0,
        }
    }

    fn absorb(&mut self, rec: &StepRecord, z0: f64, dt: f64, intervened: bool, infeasible: bool) {
        self.steps += 1;
        self.fuel_g += rec.row.fuel_rate_g_s * dt;
        self.distance_m += rec.row.v_h_m_s * dt;
        let err = rec.row.a_m_s2 - rec.row.a_des_m_s2;
        self.sq_accel_err += err * err;
        let terms = rec.reward.as_array();
        for (s, t) in self.sum_terms.iter_mut().zip(terms) {
            *s += t;
        }
        self.sum_approach += (rec.row.v_h_m_s - rec.row.v_l_m_s).max(0.0);
        if intervened {
            self.interventions += 1;
        }
        if infeasible {
            self.infeasible_steps += 1;
        }
        let z_after = rec.state_after.separation_m;
        self.min_gap_m = self.min_gap_m.min(z_after);
        if z_after < z0 - CRASH_TOLERANCE_M {
            self.crash_count += 1;
        }
    }

    fn finish(self) -> EpisodeMetrics {
        let n = self.steps.max(1) as f64;
        let gallons = self.fuel_g / 1000.0 / DIESEL_DENSITY_KG_PER_L / US_GALLON_L;
        let mpg = if gallons > 0.0 {
            (self.distance_m / MILE_M) / gallons
        } else {
            0.0
        };
        let mean_terms = self.sum_terms.map(|s| s / n);
        EpisodeMetrics {
            episode_index: self.episode_index,
            steps: self.steps,
            crash_count: self.crash_count,
            min_gap_m: self.min_gap_m,
            fuel_g: self.fuel_g,
            distance_m: self.distance_m,
            mpg,
            a_rms_m_s2: (self.sq_accel_err / n).sqrt(),
            mean_reward_terms: mean_terms,
            mean_reward: mean_terms.iter().sum(),
            intervention_rate: self.interventions as f64 / n,
            infeasible_steps: self.infeasible_steps,
            mean_approach_rate_m_s: self.sum_approach / n,
        }
    }
}

/// Run one episode to completion; deterministic given (config, episode
/// index).
pub fn run_episode(
    cfg: &ExperimentConfig,
    controller: &Controller,
    episode_index: u64,
) -> Result<(EpisodeMetrics, Vec<TraceRow>), HarnessError> {
    let mut sim = EpisodeSim::new(cfg, episode_index)?;
    let mut acc = MetricsAccumulator::new(episode_index, &sim.state);
    let mut trace = Vec::with_capacity(if cfg.run.write_traces { 4096 } else { 0 });
    let z0 = cfg.safety.z0_m;
    let dt = cfg.run.dt_s;
    while !sim.done() {
        let rec = sim.step(controller)?;
        acc.absorb(&rec, z0, dt, rec.intervened, rec.infeasible);
        if cfg.run.write_traces {
            trace.push(rec.row);
        }
    }
    Ok((acc.finish(), trace))
}

/// Aggregate over all episodes of a run; RMS quantities pool the underlying
/// sums so they aggregate exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub episodes: u64,
    pub total_steps: u64,
    pub total_crash_count: u64,
    pub min_gap_m: f64,
    pub total_fuel_g: f64,
    pub total_distance_m: f64,
    pub mpg: f64,
    pub a_rms_m_s2: f64,
    pub mean_reward_terms: [f64; 4],
    pub mean_reward: f64,
    pub intervention_rate: f64,
    pub mean_approach_rate_m_s: f64,
}

pub fn aggregate(episodes: &[EpisodeMetrics]) -> AggregateMetrics {
    let mut total_steps = 0u64;
    let mut crash = 0u64;
    let mut min_gap = f64::INFINITY;
    let mut fuel = 0.0;
    let mut dist = 0.0;
    let mut sq = 0.0;
    let mut terms = [0.0; 4];
    let mut interventions = 0.0;
    let mut approach = 0.0;
    for m in episodes {
        let n = m.steps as f64;
        total_steps += m.steps;
        crash += m.crash_count;
        min_gap = min_gap.min(m.min_gap_m);
        fuel += m.fuel_g;
        dist += m.distance_m;
        sq += m.a_rms_m_s2 * m.a_rms_m_s2 * n;
        for (acc, t) in terms.iter_mut().zip(m.mean_reward_terms) {
            *acc += t * n;
        }
        interventions += m.intervention_rate * n;
        approach += m.mean_approach_rate_m_s * n;
    }
    let n = (total_steps.max(1)) as f64;
    let gallons = fuel / 1000.0 / DIESEL_DENSITY_KG_PER_L / US_GALLON_L;
    let mean_terms = terms.map(|t| t / n);
    AggregateMetrics {
        episodes: episodes.len() as u64,
        total_steps,
        total_crash_count: crash,
        min_gap_m: if episodes.is_empty() { 0.0 } else { min_gap },
        total_fuel_g: fuel,
        total_distance_m: dist,
        mpg: if gallons > 0.0 {
            (dist / MILE_M) / gallons
        } else {
            0.0
        },
        a_rms_m_s2: (sq / n).sqrt(),
        mean_reward_terms: mean_terms,
        mean_reward: mean_terms.iter().sum(),
        intervention_rate: interventions / n,
        mean_approach_rate_m_s: approach / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResults {
    pub config_hash: String,
    pub seed: u64,
    pub episodes: Vec<EpisodeMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Run all configured episodes (in parallel, reduced by index) and collect
/// metrics plus optional traces.
pub fn simulate(
    cfg: &ExperimentConfig,
    policy: Option<&PolicyParams>,
) -> Result<(SimulationResults, Vec<Vec<TraceRow>>), HarnessError> {
    let make_controller = || -> Result<Controller, HarnessError> {
        Ok(match cfg.run.controller {
            ControllerKind::Rl => Controller::Rl {
                policy: policy.ok_or(HarnessError::MissingPolicy)?,
                deterministic: false,
            },
            ControllerKind::Baseline => Controller::Baseline,
            ControllerKind::Adversarial => Controller::Adversarial,
        })
    };
    // Fail fast on a missing policy before spawning workers.
    make_controller()?;
    let outputs: Result<Vec<_>, HarnessError> = (0..cfg.run.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let controller = make_controller()?;
            run_episode(cfg, &controller, i)
        })
        .collect();
    let outputs = outputs?;
    let (metrics, traces): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    let aggregate = aggregate(&metrics);
    Ok((
        SimulationResults {
            config_hash: cfg.hash(),
            seed: cfg.run.seed,
            episodes: metrics,
            aggregate,
        },
        traces,
    ))
}

/// Explicit RNG state: the serde impl of the generator itself does not
/// capture the position inside the current block, so checkpoints store
/// (seed, word position) and rebuild the stream exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// A versioned, bit-exact snapshot of everything training needs to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub steps_done: u64,
    pub policy: PolicyParams,
    pub rng_state: RngState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|source| HarnessError::Output {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Checkpoint(e.to_string(), path.display().to_string())
        })?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            HarnessError::Checkpoint(e.to_string(), path.display().to_string())
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Checkpoint(
                format!("unsupported version {}", ck.version),
                path.display().to_string(),
            ));
        }
        Ok(ck)
    }
}

/// Per-epoch training statistics (one learning-curve row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub env_steps: u64,
    pub mean_reward: f64,
    pub mean_reward_terms: [f64; 4],
    pub crash_steps: u64,
    pub intervention_rate: f64,
    pub critic_loss: f64,
    pub gear_entropy: f64,
    pub torque_entropy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochStats>,
    pub total_crash_steps: u64,
    /// Set when training aborted on a non-finite gradient; the checkpoint
    /// holds the last good parameters.
    pub aborted: Option<String>,
}

#[derive(Default)]
struct EpochAccumulator {
    steps: u64,
    reward: f64,
    terms: [f64; 4],
    crash: u64,
    interventions: u64,
    critic_loss: f64,
    gear_entropy: f64,
    torque_entropy: f64,
    updates: u64,
}

impl EpochAccumulator {
    fn flush(&mut self, curve: &mut Vec<EpochStats>, steps_done: u64) {
        let n = self.steps as f64;
        let u = self.updates.max(1) as f64;
        curve.push(EpochStats {
            epoch: curve.len() as u64,
            env_steps: steps_done,
            mean_reward: self.reward / n,
            mean_reward_terms: self.terms.map(|t| t / n),
            crash_steps: self.crash,
            intervention_rate: self.interventions as f64 / n,
            critic_loss: self.critic_loss / u,
            gear_entropy: self.gear_entropy / u,
            torque_entropy: self.torque_entropy / u,
        });
        *self = EpochAccumulator::default();
    }
}

/// Train the hybrid policy in the filtered environment.
///
/// A pool of rollout workers (each its own randomized episode) steps in
/// lockstep; every `segment_len` iterations their segments form one batch
/// for the updater. Worker order, episode assignment and sampling streams
/// are all derived from the config, so training is deterministic.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed ^ 0x7261_696e);
    let mut policy = PolicyParams::new(cfg.training.hidden_width, &cfg.vehicle, &mut rng);
    policy.discount = cfg.training.discount;
    policy.actor_lr = cfg.training.actor_lr;
    policy.critic_lr = cfg.training.critic_lr;
    let mut trainer = Trainer::new(
        TrainerConfig {
            entropy_coeff: cfg.training.entropy_coeff,
            gear_entropy_coeff: cfg.training.gear_entropy_coeff,
            n_step: cfg.training.n_step,
            normalize_advantages: cfg.training.normalize_advantages,
            ..Default::default()
        },
        &policy,
    );

    let mut curve = Vec::new();
    let mut total_crash = 0u64;
    let mut aborted = None;
    let mut steps_done: u64 = 0;
    let mut episode_counter: u64 = 0;
    let mut epoch = EpochAccumulator::default();

    let workers = cfg.training.workers.max(1);
    let mut sims: Vec<EpisodeSim> = Vec::with_capacity(workers);
    let mut buffers: Vec<Vec<Transition>> = vec![Vec::new(); workers];
    for _ in 0..workers {
        sims.push(EpisodeSim::new(cfg, episode_counter)?);
        episode_counter += 1;
    }

    let bootstrap_of = |sim: &EpisodeSim, policy: &PolicyParams| {
        PolicyState::from_sim(
            &sim.state,
            0.0,
            0.0,
            sim.state.separation_m <= cfg.safety.radar_range_m,
            cfg.safety.radar_range_m,
            &sim.setup.vehicle,
            &policy.norm,
        )
    };

    'training: while steps_done < cfg.training.steps {
        let mut pending: Vec<Segment> = Vec::new();

        for _ in 0..cfg.training.segment_len {
            if steps_done >= cfg.training.steps {
                break;
            }
            for (sim, buffer) in sims.iter_mut().zip(buffers.iter_mut()) {
                if steps_done >= cfg.training.steps {
                    break;
                }
                if sim.done() {
                    // Episode over (cycle end or radar timeout): flush its
                    // partial segment and move the worker to a new episode.
                    if !buffer.is_empty() {
                        pending.push(Segment {
                            transitions: std::mem::take(buffer),
                            bootstrap_state: bootstrap_of(sim, &policy),
                            bootstrap: true,
                        });
                    }
                    *sim = EpisodeSim::new(cfg, episode_counter)?;
                    episode_counter += 1;
                }
                let controller = Controller::Rl {
                    policy: &policy,
                    deterministic: false,
                };
                let rec = sim.step(&controller)?;
                steps_done += 1;
                epoch.steps += 1;
                let total = rec.reward.total();
                epoch.reward += total;
                for (acc, t) in epoch.terms.iter_mut().zip(rec.reward.as_array()) {
                    *acc += t;
                }
                if rec.state_after.separation_m < cfg.safety.z0_m - CRASH_TOLERANCE_M {
                    epoch.crash += 1;
                    total_crash += 1;
                }
                if rec.intervened {
                    epoch.interventions += 1;
                }
                buffer.push(Transition {
                    state: rec.features,
                    sampled: rec.sampled.expect("rl controller always samples"),
                    reward: total,
                });
            }
        }

        for (sim, buffer) in sims.iter_mut().zip(buffers.iter_mut()) {
            if !buffer.is_empty() {
                pending.push(Segment {
                    transitions: std::mem::take(buffer),
                    bootstrap_state: bootstrap_of(sim, &policy),
                    bootstrap: true,
                });
            }
        }
        if pending.is_empty() {
            continue;
        }

        // Linear entropy decay and actor step-size annealing (down to 20%)
        // over the training budget.
        let progress = steps_done as f64 / cfg.training.steps.max(1) as f64;
        trainer.cfg.entropy_scale = 1.0 - progress;
        trainer.set_actor_lr_scale(1.0 - 0.8 * progress);
        match trainer.train_batch(&mut policy, &pending) {
            Ok(diag) => {
                epoch.updates += 1;
                epoch.critic_loss += diag.critic_loss;
                epoch.gear_entropy += diag.gear_entropy;
                epoch.torque_entropy += diag.torque_entropy;
            }
            Err(e @ TrainError::NonFiniteGradient { .. }) => {
                aborted = Some(e.to_string());
                break 'training;
            }
            Err(e) => return Err(e.into()),
        }

        if epoch.steps >= cfg.training.epoch_steps {
            epoch.flush(&mut curve, steps_done);
        }
    }
    if epoch.steps > 0 {
        epoch.flush(&mut curve, steps_done);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            steps_done,
            policy,
            rng_state: RngState::capture(&rng),
        },
        curve,
        total_crash_steps: total_crash,
        aborted,
    })
}

/// One comparison row of the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub controller: String,
    pub filter: String,
    pub mpg: f64,
    pub fuel_g_per_km: f64,
    pub a_rms_m_s2: f64,
    pub crash_count: u64,
    pub mean_accommodation_reward: f64,
    pub intervention_rate: f64,
    pub mean_approach_rate_m_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub seed: u64,
    pub episodes: u64,
    pub rows: Vec<EvalRow>,
}

/// Evaluate the trained policy against the model-based baseline on the
/// configured (held-out) cycle: the baseline runs bare, the policy runs
/// behind the configured filter, both over matched episodes with the mean
/// (deterministic) policy head.
pub fn evaluate(
    cfg: &ExperimentConfig,
    policy: &PolicyParams,
) -> Result<ComparisonReport, HarnessError> {
    let mut rows = Vec::new();

    let mut baseline_cfg = cfg.clone();
    baseline_cfg.run.controller = ControllerKind::Baseline;
    baseline_cfg.run.filter = crate::config::FilterChoice::None;
    let (baseline, _) = simulate(&baseline_cfg, None)?;
    rows.push(eval_row("baseline", "none", &baseline.aggregate));

    let mut rl_cfg = cfg.clone();
    rl_cfg.run.controller = ControllerKind::Rl;
    let outputs: Result<Vec<_>, HarnessError> = (0..rl_cfg.run.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let controller = Controller::Rl {
                policy,
                deterministic: true,
            };
            run_episode(&rl_cfg, &controller, i)
        })
        .collect();
    let metrics: Vec<EpisodeMetrics> = outputs?.into_iter().map(|(m, _)| m).collect();
    let agg = aggregate(&metrics);
    let filter_name = match rl_cfg.run.filter {
        crate::config::FilterChoice::Hocbf => "hocbf",
        crate::config::FilterChoice::Ecbf => "ecbf",
        crate::config::FilterChoice::None => "none",
    };
    rows.push(eval_row("rl", filter_name, &agg));

    Ok(ComparisonReport {
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        episodes: cfg.run.episodes as u64,
        rows,
    })
}

fn eval_row(controller: &str, filter: &str, agg: &AggregateMetrics) -> EvalRow {
    EvalRow {
        controller: controller.into(),
        filter: filter.into(),
        mpg: agg.mpg,
        fuel_g_per_km: if agg.total_distance_m > 0.0 {
            agg.total_fuel_g / (agg.total_distance_m / 1000.0)
        } else {
            0.0
        },
        a_rms_m_s2: agg.a_rms_m_s2,
        crash_count: agg.total_crash_count,
        mean_accommodation_reward: agg.mean_reward_terms[0],
        intervention_rate: agg.intervention_rate,
        mean_approach_rate_m_s: agg.mean_approach_rate_m_s,
    }
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, HarnessError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|source| HarnessError::Output {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    let file = std::fs::File::create(path).map_err(|source| HarnessError::Output {
        path: path.display().to_string(),
        source,
    })?;
    Ok(std::io::BufWriter::new(file))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Output {
        path: path.display().to_string(),
        source,
    }
}

/// Write `metrics.json` plus one `trace_XXX.csv` per episode.
pub fn emit_outputs(
    results: &SimulationResults,
    traces: &[Vec<TraceRow>],
    dir: &Path,
) -> Result<(), HarnessError> {
    let metrics_path = dir.join("metrics.json");
    let mut w = create(&metrics_path)?;
    let json = serde_json::to_string_pretty(results).expect("metrics serialize");
    w.write_all(json.as_bytes()).map_err(io_err(&metrics_path))?;
    w.write_all(b"\n").map_err(io_err(&metrics_path))?;

    for (i, trace) in traces.iter().enumerate() {
        if trace.is_empty() && !results.episodes.is_empty() {
            continue;
        }
        let path = dir.join(format!("trace_{i:03}.csv"));
        write_trace(&path, results, trace)?;
    }
    Ok(())
}

fn write_trace(
    path: &Path,
    results: &SimulationResults,
    trace: &[TraceRow],
) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(
        w,
        "# config_hash={} seed={}",
        results.config_hash, results.seed
    )
    .map_err(&err)?;
    writeln!(
        w,
        "time_s,z_m,v_h_m_s,v_l_m_s,gear,torque_proposed_nm,torque_applied_nm,v0,v1,v2,r_accel,r_fuel,r_torque,r_gear,a_des_m_s2,a_m_s2,fuel_rate_g_s"
    )
    .map_err(&err)?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.time_s,
            r.z_m,
            r.v_h_m_s,
            r.v_l_m_s,
            r.gear,
            r.torque_proposed_nm,
            r.torque_applied_nm,
            r.v0,
            r.v1,
            r.v2,
            r.r_accel,
            r.r_fuel,
            r.r_torque,
            r.r_gear,
            r.a_des_m_s2,
            r.a_m_s2,
            r.fuel_rate_g_s
        )
        .map_err(&err)?;
    }
    Ok(())
}

/// Write the safe-set grid (`safeset.csv`).
pub fn emit_safeset(
    cfg: &ExperimentConfig,
    cells: &[safety::SafeSetCell],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(w, "# config_hash={} seed={}", cfg.hash(), cfg.run.seed).map_err(&err)?;
    writeln!(w, "z_m,v_h_m_s,region,min_lead_speed_m_s,possible_safe").map_err(&err)?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.z_m, c.v_h_m_s, c.region, c.min_lead_speed_m_s, c.possible_safe
        )
        .map_err(&err)?;
    }
    Ok(())
}

/// Write the learning curve (`learning_curve.csv`).
pub fn emit_learning_curve(
    cfg: &ExperimentConfig,
    curve: &[EpochStats],
    path: &Path,
) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(w, "# config_hash={} seed={}", cfg.hash(), cfg.run.seed).map_err(&err)?;
    writeln!(
        w,
        "epoch,env_steps,mean_reward,r_accel,r_fuel,r_torque,r_gear,crash_steps,intervention_rate,critic_loss,gear_entropy,torque_entropy"
    )
    .map_err(&err)?;
    for e in curve {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.env_steps,
            e.mean_reward,
            e.mean_reward_terms[0],
            e.mean_reward_terms[1],
            e.mean_reward_terms[2],
            e.mean_reward_terms[3],
            e.crash_steps,
            e.intervention_rate,
            e.critic_loss,
            e.gear_entropy,
            e.torque_entropy
        )
        .map_err(&err)?;
    }
    Ok(())
}

/// Post-run invariant checks gating the CLI exit code.
pub fn run_checks(
    cfg: &ExperimentConfig,
    results: &SimulationResults,
    traces: &[Vec<TraceRow>],
) -> Vec<String> {
    let mut failures = Vec::new();
    if cfg.checks.no_crash
        && cfg.run.filter.kind().is_some()
        && results.aggregate.total_crash_count > 0
    {
        failures.push(format!(
            "no_crash: {} crash steps under an active filter",
            results.aggregate.total_crash_count
        ));
    }
    if cfg.checks.fuel_conservation {
        for (m, trace) in results.episodes.iter().zip(traces) {
            if trace.is_empty() {
                continue;
            }
            let integral: f64 = trace.iter().map(|r| r.fuel_rate_g_s * cfg.run.dt_s).sum();
            let denom = m.fuel_g.abs().max(1e-12);
            if ((integral - m.fuel_g) / denom).abs() > 1e-9 {
                failures.push(format!(
                    "fuel_conservation: episode {} integral {} vs metric {}",
                    m.episode_index, integral, m.fuel_g
                ));
            }
        }
    }
    failures
}
