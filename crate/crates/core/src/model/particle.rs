use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::consts::{E_CHARGE, HBAR};
use crate::{Error, Result};

/// Sphere mass `density * pi * d^3 / 6`.
pub fn derive_mass(diameter: f64, density: f64) -> Result<f64> {
    if !(diameter > 0.0) || !diameter.is_finite() {
        return Err(Error::domain(format!("diameter must be > 0, got {diameter}")));
    }
    if !(density > 0.0) || !density.is_finite() {
        return Err(Error::domain(format!("density must be > 0, got {density}")));
    }
    Ok(density * PI * diameter.powi(3) / 6.0)
}

/// Ground-state position spread `sqrt(hbar / (2 m omega))`.
pub fn zero_point_motion(mass: f64, omega: f64) -> Result<f64> {
    if !(mass > 0.0) {
        return Err(Error::domain(format!("mass must be > 0, got {mass}")));
    }
    if !(omega > 0.0) {
        return Err(Error::domain(format!("omega must be > 0, got {omega}")));
    }
    Ok((HBAR / (2.0 * mass * omega)).sqrt())
}

/// A dielectric sphere carrying an integer number of elementary charges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub diameter: f64,
    pub density: f64,
    pub mass: f64,
    /// Signed number of elementary charges.
    pub charge_q: i64,
}

impl Particle {
    /// Particle whose mass follows from its diameter and density.
    pub fn new(diameter: f64, density: f64, charge_q: i64) -> Result<Self> {
        let mass = derive_mass(diameter, density)?;
        Ok(Self {
            diameter,
            density,
            mass,
            charge_q,
        })
    }

    /// Particle with an explicitly measured mass; diameter and density are kept
    /// for reference only.
    pub fn with_mass(mass: f64, diameter: f64, density: f64, charge_q: i64) -> Result<Self> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::domain(format!("mass must be > 0, got {mass}")));
        }
        Ok(Self {
            diameter,
            density,
            mass,
            charge_q,
        })
    }

    /// 156 nm silica sphere at 2000 kg/m^3 carrying 45 elementary charges.
    pub fn reference() -> Self {
        Self::new(156e-9, 2000.0, 45).expect("valid defaults")
    }

    /// Charge in coulombs.
    pub fn charge(&self) -> f64 {
        self.charge_q as f64 * E_CHARGE
    }

    pub fn with_charge(&self, charge_q: i64) -> Self {
        Self {
            charge_q,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_of_reference_sphere() {
        let m = derive_mass(156e-9, 2000.0).unwrap();
        // (pi/6) * 2000 * (156e-9)^3 by hand.
        assert!((m - 3.9753e-18).abs() / 3.9753e-18 < 1e-4, "{m}");
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(derive_mass(0.0, 2000.0).is_err());
        assert!(derive_mass(1e-7, -1.0).is_err());
        assert!(zero_point_motion(0.0, 1.0).is_err());
        assert!(zero_point_motion(1.0, 0.0).is_err());
        assert!(Particle::with_mass(-1.0, 1e-7, 2000.0, 1).is_err());
    }

    #[test]
    fn doubling_diameter_multiplies_mass_by_eight() {
        let m1 = derive_mass(100e-9, 2000.0).unwrap();
        let m2 = derive_mass(200e-9, 2000.0).unwrap();
        assert!((m2 / m1 - 8.0).abs() < 1e-12);
    }

    #[test]
    fn zero_point_motion_of_axial_mode() {
        let m = derive_mass(156e-9, 2000.0).unwrap();
        let omega = 2.0 * PI * 92e3;
        let zzp = zero_point_motion(m, omega).unwrap();
        assert!((zzp - 4.79e-12).abs() < 0.01e-12, "{zzp}");
        let quarter = zero_point_motion(m, 4.0 * omega).unwrap();
        assert!((quarter / zzp - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hundred_nanometre_particle_has_order_ten_picometre_spread() {
        let m = derive_mass(100e-9, 2000.0).unwrap();
        let zzp = zero_point_motion(m, 2.0 * PI * 92e3).unwrap();
        assert!(zzp > 3e-12 && zzp < 30e-12, "{zzp}");
    }
}
