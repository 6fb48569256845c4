//! The complete physical and instrumental configuration of a simulation.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DetectorModel, FeedbackConfig, SupplyNoise};
use crate::model::{ElectrodeSystem, Environment, Particle, TrapField, TrapShape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Integration {
    /// Largest integration step (s). The actual step divides the detector
    /// sample interval evenly.
    pub dt: f64,
    /// Particle counts as lost beyond this many Rayleigh ranges.
    pub loss_radius_factor: f64,
}

impl Default for Integration {
    fn default() -> Self {
        Self { dt: 5e-9, loss_radius_factor: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub particle: Particle,
    pub trap: TrapField,
    pub electrodes: ElectrodeSystem,
    pub environment: Environment,
    pub detectors: DetectorModel,
    pub feedback: FeedbackConfig,
    pub supply_noise: Option<SupplyNoise>,
    pub integration: Integration,
    /// Occupation of each mode before a sequence starts.
    pub initial_nbar: [f64; 3],
    /// Electrode voltages held when no schedule event overrides them.
    pub dc_voltages: [f64; 3],
}

/// Feedback damping that holds the default occupations against gas and
/// recoil heating at 1e-7 mbar.
pub const REFERENCE_FEEDBACK_GAINS: [f64; 3] = [39.0, 44.0, 546.0];
pub const REFERENCE_NBAR: [f64; 3] = [500.0, 500.0, 117.0];
pub const REFERENCE_FREQUENCIES_HZ: [f64; 3] = [302e3, 268e3, 92e3];
pub const REFERENCE_CNV: [f64; 3] = [1e-18, 1e-18, 1e-16];
pub const REFERENCE_TRAP_DEPTH: f64 = 1e-19;

impl SimConfig {
    /// Parameters of the reference experiment.
    pub fn reference() -> Self {
        let particle = Particle::reference();
        let trap = TrapField::from_hz(particle.mass, REFERENCE_FREQUENCIES_HZ, REFERENCE_TRAP_DEPTH, TrapShape::Harmonic)
            .expect("valid defaults");
        let electrodes = ElectrodeSystem::from_normalized_inverse(
            &ElectrodeSystem::reference_normalized_inverse(),
            REFERENCE_CNV,
            &particle,
        )
        .expect("valid defaults");
        Self {
            environment: Environment::reference(&particle),
            particle,
            trap,
            electrodes,
            detectors: DetectorModel::reference(),
            feedback: FeedbackConfig::new(REFERENCE_FEEDBACK_GAINS),
            supply_noise: None,
            integration: Integration::default(),
            initial_nbar: REFERENCE_NBAR,
            dc_voltages: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let om = self.trap.omega_max();
        if !(self.integration.dt > 0.0) || self.integration.dt * om > 0.1 {
            return Err(Error::domain(format!(
                "integration.dt: dt * omega_max must be <= 0.1 (got {:.3})",
                self.integration.dt * om
            )));
        }
        if !(self.integration.loss_radius_factor > 0.0) {
            return Err(Error::domain("integration.loss_radius_factor: must be > 0"));
        }
        self.environment.validate()?;
        self.detectors.validate(om)?;
        self.feedback.validate(&self.trap.omega)?;
        if let Some(n) = &self.supply_noise {
            n.validate()?;
        }
        if self.initial_nbar.iter().any(|n| !(*n >= 0.0)) {
            return Err(Error::domain("initial_nbar: must be >= 0"));
        }
        if self.dc_voltages.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("dc_voltages: must be finite"));
        }
        Ok(())
    }

    pub fn dc(&self) -> Vector3<f64> {
        Vector3::from(self.dc_voltages)
    }

    /// Radius beyond which the particle is considered lost (m).
    pub fn loss_radius(&self) -> f64 {
        self.integration.loss_radius_factor * self.trap.rayleigh_z
    }

    /// Same configuration for a different charge state; geometry is kept.
    pub fn with_charge(&self, charge_q: i64) -> Self {
        let mut c = self.clone();
        c.particle = self.particle.with_charge(charge_q);
        c.electrodes = self.electrodes.for_particle(&c.particle);
        c
    }

    /// Replaces the trap shape, keeping frequencies and depth.
    pub fn with_trap_shape(&self, shape: TrapShape) -> Result<Self> {
        let mut c = self.clone();
        c.trap = TrapField::new(self.particle.mass, self.trap.omega, self.trap.depth, shape)?;
        Ok(c)
    }

    /// Net constant force at the given electrode voltages (N).
    pub fn static_force(&self, volts: &Vector3<f64>) -> Vector3<f64> {
        self.electrodes.force(volts) + self.environment.constant_force(&self.particle)
    }

    /// Voltages that null the constant force exactly.
    pub fn true_optimum(&self) -> Result<Vector3<f64>> {
        self.electrodes.nulling_voltages(&self.environment.constant_force(&self.particle))
    }
}
