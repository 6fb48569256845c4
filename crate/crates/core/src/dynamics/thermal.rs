use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::model::{zero_point_motion, Particle, StateVector, TrapField};
use crate::{Error, Result};

/// Position and momentum variances of thermal states with occupations `nbar`.
pub fn thermal_variances(nbar: [f64; 3], trap: &TrapField, particle: &Particle) -> Result<([f64; 3], [f64; 3])> {
    let mut pos = [0.0; 3];
    let mut mom = [0.0; 3];
    for i in 0..3 {
        if !(nbar[i] >= 0.0) {
            return Err(Error::domain(format!("occupation must be >= 0, got {}", nbar[i])));
        }
        let zzp = zero_point_motion(particle.mass, trap.omega[i])?;
        pos[i] = zzp * zzp * (2.0 * nbar[i] + 1.0);
        mom[i] = (particle.mass * trap.omega[i]).powi(2) * pos[i];
    }
    Ok((pos, mom))
}

/// Draws a phase-space point from the thermal state with occupations `nbar`.
pub fn sample_thermal_state<R: Rng + ?Sized>(
    nbar: [f64; 3],
    trap: &TrapField,
    particle: &Particle,
    rng: &mut R,
) -> Result<StateVector> {
    let (pos, mom) = thermal_variances(nbar, trap, particle)?;
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let r = Vector3::new(pos[0].sqrt() * n(), pos[1].sqrt() * n(), pos[2].sqrt() * n());
    let p = Vector3::new(mom[0].sqrt() * n(), mom[1].sqrt() * n(), mom[2].sqrt() * n());
    Ok(StateVector::new(r, p))
}
