//! Experiment configuration: one TOML file describes a whole run. Unknown
//! keys are rejected so typos fail loudly, and the canonical-JSON SHA-256 of
//! the effective config stamps every output file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controllers::RewardWeights;
use crate::driver::{CycleKind, DriveCycle, DriverError, IdmParams, RandomizationSpec};
use crate::dynamics::VehicleParams;
use crate::safety::{FilterKind, SafetyConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterChoice {
    Hocbf,
    Ecbf,
    None,
}

impl FilterChoice {
    pub fn kind(self) -> Option<FilterKind> {
        match self {
            FilterChoice::Hocbf => Some(FilterKind::Hocbf),
            FilterChoice::Ecbf => Some(FilterKind::Ecbf),
            FilterChoice::None => None,
        }
    }
}

impl std::str::FromStr for FilterChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hocbf" => Ok(FilterChoice::Hocbf),
            "ecbf" => Ok(FilterChoice::Ecbf),
            "none" => Ok(FilterChoice::None),
            other => Err(format!("unknown filter {other:?} (hocbf|ecbf|none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Rl,
    Baseline,
    Adversarial,
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rl" => Ok(ControllerKind::Rl),
            "baseline" => Ok(ControllerKind::Baseline),
            "adversarial" => Ok(ControllerKind::Adversarial),
            other => Err(format!(
                "unknown controller {other:?} (rl|baseline|adversarial)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverConfig {
    pub idm: IdmParams,
    pub randomization: RandomizationSpec,
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig {
            idm: IdmParams::default(),
            randomization: RandomizationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleSource {
    Urban,
    Highway,
    Sawtooth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleConfig {
    pub source: CycleSource,
    pub duration_s: f64,
    pub seed: u64,
    /// CSV path, required when `source = "csv"`.
    pub path: Option<PathBuf>,
    /// Hard lead-braking events spliced into each episode's cycle.
    pub brake_events: usize,
}

impl Default for CycleConfig {
    fn default() -> Self {
        CycleConfig {
            source: CycleSource::Urban,
            duration_s: 600.0,
            seed: 0,
            path: None,
            brake_events: 0,
        }
    }
}

impl CycleConfig {
    pub fn build_base(&self) -> Result<DriveCycle, DriverError> {
        match self.source {
            CycleSource::Urban => Ok(crate::driver::synthesize_cycle(
                CycleKind::Urban,
                self.duration_s,
                self.seed,
            )),
            CycleSource::Highway => Ok(crate::driver::synthesize_cycle(
                CycleKind::Highway,
                self.duration_s,
                self.seed,
            )),
            CycleSource::Sawtooth => Ok(crate::driver::synthesize_cycle(
                CycleKind::Sawtooth,
                self.duration_s,
                self.seed,
            )),
            CycleSource::Csv => {
                let path = self.path.as_ref().ok_or(DriverError::InvalidCycle(
                    "cycle.source = \"csv\" requires cycle.path".into(),
                ))?;
                DriveCycle::from_csv(path)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dt_s: f64,
    /// Episode length; defaults to the cycle duration when zero.
    pub episode_length_s: f64,
    pub episodes: usize,
    pub filter: FilterChoice,
    pub controller: ControllerKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub write_traces: bool,
    /// End the episode after this long continuously out of radar.
    pub out_of_radar_timeout_s: f64,
    /// Mass the model-based baseline assumes (its calibration point);
    /// episodes still run the randomized true mass.
    pub baseline_nominal_mass_kg: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dt_s: 0.1,
            episode_length_s: 0.0,
            episodes: 10,
            filter: FilterChoice::Hocbf,
            controller: ControllerKind::Rl,
            seed: 0,
            output_dir: PathBuf::from("out"),
            write_traces: false,
            out_of_radar_timeout_s: 60.0,
            baseline_nominal_mass_kg: 8500.0,
        }
    }
}

/// Hyperparameters of the maximum-a-posteriori optimizer family, recorded in
/// the schema for a future plug-in trainer. The bundled advantage
/// actor-critic trainer does not read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpoHyperparams {
    pub dual_constraint: f64,
    pub retrace_steps: u32,
    pub kl_mean: f64,
    pub kl_sigma: f64,
    pub kl_discrete: f64,
    pub alpha_d: f64,
    pub alpha_c: f64,
}

impl Default for MpoHyperparams {
    fn default() -> Self {
        MpoHyperparams {
            dual_constraint: 0.1,
            retrace_steps: 1,
            kl_mean: 0.1,
            kl_sigma: 0.001,
            kl_discrete: 0.1,
            alpha_d: 10.0,
            alpha_c: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    pub hidden_width: usize,
    /// Parallel rollout workers batched per update.
    pub workers: usize,
    pub segment_len: usize,
    pub epoch_steps: u64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coeff: f64,
    pub gear_entropy_coeff: f64,
    pub n_step: usize,
    pub discount: f64,
    pub normalize_advantages: bool,
    pub mpo: MpoHyperparams,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 200_000,
            hidden_width: 128,
            workers: 8,
            segment_len: 32,
            epoch_steps: 2000,
            actor_lr: 3e-4,
            critic_lr: 3e-3,
            entropy_coeff: 1e-3,
            gear_entropy_coeff: 3e-3,
            n_step: 8,
            discount: 0.95,
            normalize_advantages: false,
            mpo: MpoHyperparams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Fail the run (non-zero exit) on any crash step while filtered.
    pub no_crash: bool,
    /// Verify fuel_g equals the dt-weighted trace integral to 1e-9 relative.
    pub fuel_conservation: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            no_crash: true,
            fuel_conservation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub vehicle: VehicleParams,
    pub safety: SafetyConfig,
    pub driver: DriverConfig,
    pub cycle: CycleConfig,
    pub run: RunConfig,
    pub reward: RewardWeights,
    pub training: TrainingConfig,
    pub checks: CheckConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source: Box::new(source),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.vehicle
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.safety.validate().map_err(|e| invalid(e.to_string()))?;
        self.driver
            .idm
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.driver
            .randomization
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.reward.validate().map_err(invalid)?;
        if !(self.run.dt_s > 0.0) {
            return Err(invalid("run.dt_s must be positive".into()));
        }
        if self.cycle.source == CycleSource::Csv && self.cycle.path.is_none() {
            return Err(invalid("cycle.source = \"csv\" requires cycle.path".into()));
        }
        if !(self.cycle.duration_s > 0.0) {
            return Err(invalid("cycle.duration_s must be positive".into()));
        }
        if !(self.training.discount > 0.0 && self.training.discount < 1.0) {
            return Err(invalid("training.discount must lie in (0, 1)".into()));
        }
        if self.training.segment_len == 0 || self.training.n_step == 0 {
            return Err(invalid(
                "training.segment_len and training.n_step must be positive".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization; changes iff any
    /// config field changes.
    pub fn hash(&self) -> String {
        let canonical =
            serde_json::to_string(self).expect("config always serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn episode_length_s(&self) -> f64 {
        if self.run.episode_length_s > 0.0 {
            self.run.episode_length_s
        } else {
            self.cycle.duration_s
        }
    }
}
