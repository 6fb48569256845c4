//! Stochastic simulation and analysis toolkit for electrostatic force
//! compensation of a levitated, charged nanoparticle.
//!
//! The crate is organised the way the experiment is:
//!
//! * [`model`] holds the physical configuration (particle, optical trap,
//!   electrodes, environment) and the deterministic force field.
//! * [`dynamics`] integrates the Langevin equations of motion through
//!   trap/feedback/voltage pulse schedules and produces detector traces.
//! * [`analytics`] contains the closed-form Gaussian-state predictions and
//!   covariance propagation used as oracles.
//! * [`analysis`] implements the fitting and spectral estimators applied to
//!   time traces.
//! * [`protocols`] chains the above into the calibration and measurement
//!   procedures (compensation scans, cross-cooling, recompression, ...).

pub mod analysis;
pub mod analytics;
pub mod config;
pub mod consts;
pub mod dynamics;
mod error;
mod linalg;
pub mod model;
pub mod protocols;
pub mod rng;

pub use config::SimConfig;
pub use error::{Error, Result};
pub use model::{
    Axis, CovarianceState, ElectrodeSystem, Environment, Particle, StateVector, TrapField,
    TrapShape,
};
