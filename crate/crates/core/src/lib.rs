//! Longitudinal powertrain control laboratory: car-following dynamics, a
//! two-region high-order barrier safety filter with an exponential-CBF
//! comparison, an IDM driver, a hybrid-action RL controller with a
//! model-based baseline, and the experiment harness that ties them together.

pub mod config;
pub mod controllers;
pub mod dynamics;
pub mod fuel;
pub mod harness;
pub mod nn;
pub mod driver;
pub mod safety;
pub mod trainer;

pub use dynamics::{SimState, VehicleParams};
pub use safety::{FilterKind, SafetyConfig};
