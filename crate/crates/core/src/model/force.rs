use nalgebra::Vector3;

use super::{ElectrodeSystem, Environment, Particle, StateVector, TrapField};

/// Everything that enters the deterministic force at one instant.
#[derive(Debug, Clone, Copy)]
pub struct ForceInputs<'a> {
    pub particle: &'a Particle,
    pub trap: &'a TrapField,
    pub electrodes: &'a ElectrodeSystem,
    pub environment: &'a Environment,
}

/// Deterministic force: trap + `C V` + stray, non-electrostatic and
/// gravitational forces + feedback. Damping and noise belong to the
/// integrator.
pub fn total_force(
    state: &StateVector,
    inputs: ForceInputs<'_>,
    voltages: &Vector3<f64>,
    envelope: f64,
    feedback_force: &Vector3<f64>,
) -> Vector3<f64> {
    inputs.trap.force(&state.position, envelope)
        + inputs.electrodes.force(voltages)
        + inputs.environment.constant_force(inputs.particle)
        + feedback_force
}
