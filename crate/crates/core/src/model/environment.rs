use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::Particle;
use crate::consts::{G_STANDARD, KB, M_N2};
use crate::{Error, Result};

/// Free-molecular (Epstein) momentum damping rate for a sphere in N2 with
/// diffuse reflection.
pub fn epstein_damping(pressure_mbar: f64, temperature: f64, diameter: f64, density: f64) -> Result<f64> {
    if !(pressure_mbar >= 0.0) || !(temperature > 0.0) || !(diameter > 0.0) || !(density > 0.0) {
        return Err(Error::domain(
            "pressure must be >= 0 and temperature, diameter, density > 0",
        ));
    }
    let pressure = pressure_mbar * 100.0;
    let gas_density = pressure * M_N2 / (KB * temperature);
    let mean_speed = (8.0 * KB * temperature / (std::f64::consts::PI * M_N2)).sqrt();
    let delta = 1.0 + std::f64::consts::PI / 8.0;
    Ok(delta * gas_density * mean_speed / (density * diameter / 2.0))
}

/// Slow exponential relaxation of the axial stray field, in volts equivalent
/// on the z electrode: `V(t) = v_final + v_amplitude * exp(-t / rc)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChargeDrift {
    pub v_final: f64,
    pub v_amplitude: f64,
    /// Time constant (s).
    pub rc: f64,
}

impl ChargeDrift {
    pub fn volts_at(&self, t: f64) -> f64 {
        self.v_final + self.v_amplitude * (-t / self.rc).exp()
    }
}

/// Gas, photon recoil and static forces acting on the particle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    /// Informational; the damping rate below is authoritative.
    pub pressure_mbar: Option<f64>,
    pub gas_temperature: f64,
    /// Momentum damping rate (1/s).
    pub gamma: f64,
    /// Recoil momentum diffusion per axis (N^2 s), active while the trap is on.
    pub recoil_dp: [f64; 3],
    /// Stray electric field at the trap centre, trap basis (V/m).
    pub stray_field: Vector3<f64>,
    pub nonelectrostatic_force: Vector3<f64>,
    /// Gravitational acceleration, trap basis (m/s^2).
    pub gravity: Vector3<f64>,
    pub drift: Option<ChargeDrift>,
}

impl Environment {
    /// Ultra-high vacuum at 1e-7 mbar with recoil heating equal to gas heating
    /// and gravity along -x.
    pub fn reference(particle: &Particle) -> Self {
        let gamma = epstein_damping(1e-7, 300.0, particle.diameter, particle.density)
            .expect("valid defaults");
        let recoil = 2.0 * particle.mass * gamma * KB * 300.0;
        Self {
            pressure_mbar: Some(1e-7),
            gas_temperature: 300.0,
            gamma,
            recoil_dp: [recoil; 3],
            stray_field: Vector3::zeros(),
            nonelectrostatic_force: Vector3::zeros(),
            gravity: Vector3::new(-G_STANDARD, 0.0, 0.0),
            drift: None,
        }
    }

    /// No damping, no diffusion, no static forces.
    pub fn vacuum() -> Self {
        Self {
            pressure_mbar: None,
            gas_temperature: 0.0,
            gamma: 0.0,
            recoil_dp: [0.0; 3],
            stray_field: Vector3::zeros(),
            nonelectrostatic_force: Vector3::zeros(),
            gravity: Vector3::zeros(),
            drift: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::domain(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.gas_temperature >= 0.0) {
            return Err(Error::domain("gas temperature must be >= 0"));
        }
        if self.recoil_dp.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::domain("recoil diffusion must be >= 0"));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.stray_field) || !finite(&self.nonelectrostatic_force) || !finite(&self.gravity)
        {
            return Err(Error::domain("static force terms must be finite"));
        }
        if let Some(d) = &self.drift {
            if !(d.rc > 0.0) {
                return Err(Error::domain("drift time constant must be > 0"));
            }
        }
        Ok(())
    }

    /// Total constant external force `q e E + F_ne + m g`.
    pub fn constant_force(&self, particle: &Particle) -> Vector3<f64> {
        self.stray_field * particle.charge() + self.nonelectrostatic_force + self.gravity * particle.mass
    }

    /// Momentum diffusion per axis `2 m gamma kT + recoil * envelope`.
    pub fn diffusion(&self, mass: f64, envelope: f64) -> [f64; 3] {
        let gas = 2.0 * mass * self.gamma * KB * self.gas_temperature;
        self.recoil_dp.map(|r| gas + r * envelope)
    }
}
