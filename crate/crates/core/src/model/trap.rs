use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::Axis;
use crate::{Error, Result};

/// Spatial profile of the optical potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrapShape {
    /// Pure quadratic potential.
    #[default]
    Harmonic,
    /// Focused Gaussian beam: Gaussian radially, Lorentzian along the beam,
    /// `U = -U0 s(z) exp(-2 [(x/wx)^2 + (y/wy)^2] s(z))`, `s = 1/(1+(z/zR)^2)`.
    GaussianBeam,
    /// Gaussian in all three axes with each waist set by its trap frequency,
    /// `U = -U0 exp(-2 sum (r_i/w_i)^2)` and `w_i^2 = 4 U0 / (m Omega_i^2)`.
    GaussianEllipsoid,
}

/// Optical trap described by its three mode frequencies plus the beam
/// geometry implied by them and a chosen depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapField {
    /// Angular mode frequencies (rad/s) along x, y, z.
    pub omega: [f64; 3],
    /// Spring constants `m Omega_i^2` (N/m).
    pub stiffness: [f64; 3],
    /// Trap depth `U0` (J).
    pub depth: f64,
    pub waist_x: f64,
    pub waist_y: f64,
    pub rayleigh_z: f64,
    pub shape: TrapShape,
}

impl TrapField {
    /// Builds the trap for a particle of `mass`. The beam geometry is derived
    /// from the frequencies with `depth` as the free scale.
    pub fn new(mass: f64, omega: [f64; 3], depth: f64, shape: TrapShape) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::domain(format!("mass must be > 0, got {mass}")));
        }
        if let Some(w) = omega.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::domain(format!("trap frequencies must be > 0, got {w}")));
        }
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(Error::domain(format!("trap depth must be > 0, got {depth}")));
        }
        let stiffness = omega.map(|w| mass * w * w);
        Ok(Self {
            omega,
            stiffness,
            depth,
            waist_x: (4.0 * depth / stiffness[0]).sqrt(),
            waist_y: (4.0 * depth / stiffness[1]).sqrt(),
            rayleigh_z: (2.0 * depth / stiffness[2]).sqrt(),
            shape,
        })
    }

    /// Convenience constructor from frequencies in Hz.
    pub fn from_hz(mass: f64, freq_hz: [f64; 3], depth: f64, shape: TrapShape) -> Result<Self> {
        Self::new(mass, freq_hz.map(|f| 2.0 * std::f64::consts::PI * f), depth, shape)
    }

    pub fn omega_max(&self) -> f64 {
        self.omega.iter().copied().fold(0.0, f64::max)
    }

    pub fn omega_of(&self, axis: Axis) -> f64 {
        self.omega[axis.index()]
    }

    /// Axial Gaussian waist of the ellipsoidal profile.
    pub fn waist_z(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.rayleigh_z
    }

    /// Length scale over which the potential departs from a parabola along
    /// `axis` (waist radially, Rayleigh range or axial waist along z).
    pub fn length_scale(&self, axis: Axis) -> f64 {
        match (axis, self.shape) {
            (Axis::X, _) => self.waist_x,
            (Axis::Y, _) => self.waist_y,
            (Axis::Z, TrapShape::GaussianEllipsoid) => self.waist_z(),
            (Axis::Z, _) => self.rayleigh_z,
        }
    }

    /// Optical potential (J) at `r`, full intensity.
    pub fn potential(&self, r: &Vector3<f64>) -> f64 {
        match self.shape {
            TrapShape::Harmonic => {
                -self.depth
                    + 0.5
                        * (self.stiffness[0] * r.x * r.x
                            + self.stiffness[1] * r.y * r.y
                            + self.stiffness[2] * r.z * r.z)
            }
            TrapShape::GaussianBeam => {
                let s = 1.0 / (1.0 + (r.z / self.rayleigh_z).powi(2));
                let q = 2.0 * ((r.x / self.waist_x).powi(2) + (r.y / self.waist_y).powi(2));
                -self.depth * s * (-q * s).exp()
            }
            TrapShape::GaussianEllipsoid => {
                let wz = self.waist_z();
                let q = 2.0
                    * ((r.x / self.waist_x).powi(2)
                        + (r.y / self.waist_y).powi(2)
                        + (r.z / wz).powi(2));
                -self.depth * (-q).exp()
            }
        }
    }

    /// Optical force at `r`, scaled by the intensity `envelope` in `[0, 1]`.
    pub fn force(&self, r: &Vector3<f64>, envelope: f64) -> Vector3<f64> {
        if envelope == 0.0 {
            return Vector3::zeros();
        }
        match self.shape {
            TrapShape::Harmonic => Vector3::new(
                -envelope * self.stiffness[0] * r.x,
                -envelope * self.stiffness[1] * r.y,
                -envelope * self.stiffness[2] * r.z,
            ),
            TrapShape::GaussianBeam => {
                let (wx2, wy2, zr2) = (
                    self.waist_x * self.waist_x,
                    self.waist_y * self.waist_y,
                    self.rayleigh_z * self.rayleigh_z,
                );
                let s = 1.0 / (1.0 + r.z * r.z / zr2);
                let q = 2.0 * (r.x * r.x / wx2 + r.y * r.y / wy2);
                let e = (-q * s).exp();
                let radial = -envelope * self.depth * s * s * e * 4.0;
                Vector3::new(
                    radial * r.x / wx2,
                    radial * r.y / wy2,
                    -envelope * self.depth * 2.0 * r.z / zr2 * s * s * e * (1.0 - q * s),
                )
            }
            TrapShape::GaussianEllipsoid => {
                let wz = self.waist_z();
                let (wx2, wy2, wz2) = (
                    self.waist_x * self.waist_x,
                    self.waist_y * self.waist_y,
                    wz * wz,
                );
                let q = 2.0 * (r.x * r.x / wx2 + r.y * r.y / wy2 + r.z * r.z / wz2);
                let c = -envelope * self.depth * 4.0 * (-q).exp();
                Vector3::new(c * r.x / wx2, c * r.y / wy2, c * r.z / wz2)
            }
        }
    }

    /// Fractional shortfall of the potential below its harmonic approximation
    /// at displacement `d` along `axis`: `1 - dU(d) / (k d^2 / 2)`.
    pub fn anharmonic_deviation(&self, axis: Axis, d: f64) -> f64 {
        if d == 0.0 {
            return 0.0;
        }
        let mut r = Vector3::zeros();
        r[axis.index()] = d;
        let du = self.potential(&r) - self.potential(&Vector3::zeros());
        1.0 - du / (0.5 * self.stiffness[axis.index()] * d * d)
    }

    /// Displacement along `axis` at which [`Self::anharmonic_deviation`]
    /// reaches `deviation`. Found by bisection on the actual potential.
    pub fn equivalent_nonlinearity_displacement(&self, axis: Axis, deviation: f64) -> Result<f64> {
        if self.shape == TrapShape::Harmonic {
            return Err(Error::domain("a harmonic trap has no nonlinearity"));
        }
        if !(deviation > 0.0 && deviation < 0.5) {
            return Err(Error::domain(format!(
                "deviation must lie in (0, 0.5), got {deviation}"
            )));
        }
        let mut lo = 0.0;
        let mut hi = self.length_scale(axis);
        while self.anharmonic_deviation(axis, hi) < deviation {
            hi *= 2.0;
            if hi > 1e3 * self.length_scale(axis) {
                return Err(Error::Numerical("deviation never reached".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.anharmonic_deviation(axis, mid) < deviation {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::derive_mass;

    fn mass() -> f64 {
        derive_mass(156e-9, 2000.0).unwrap()
    }

    fn trap(shape: TrapShape) -> TrapField {
        TrapField::from_hz(mass(), [302e3, 268e3, 92e3], 1e-19, shape).unwrap()
    }

    #[test]
    fn geometry_reproduces_frequencies() {
        let t = trap(TrapShape::GaussianBeam);
        let m = mass();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(t.omega[0].powi(2), 4.0 * t.depth / (m * t.waist_x.powi(2))) < 1e-12);
        assert!(rel(t.omega[1].powi(2), 4.0 * t.depth / (m * t.waist_y.powi(2))) < 1e-12);
        assert!(rel(t.omega[2].powi(2), 2.0 * t.depth / (m * t.rayleigh_z.powi(2))) < 1e-12);
    }

    #[test]
    fn force_vanishes_at_origin_and_when_off() {
        for shape in [TrapShape::Harmonic, TrapShape::GaussianBeam, TrapShape::GaussianEllipsoid] {
            let t = trap(shape);
            assert_eq!(t.force(&Vector3::zeros(), 1.0), Vector3::zeros());
            let r = Vector3::new(1e-8, -2e-8, 3e-8);
            assert_eq!(t.force(&r, 0.0), Vector3::zeros());
        }
    }

    #[test]
    fn small_axial_displacement_matches_harmonic_limit() {
        let t = trap(TrapShape::GaussianBeam);
        let z = 0.01 * t.rayleigh_z;
        let f = t.force(&Vector3::new(0.0, 0.0, z), 1.0).z;
        let harmonic = -mass() * t.omega[2].powi(2) * z;
        assert!(((f - harmonic) / harmonic).abs() < 1e-3);
    }

    #[test]
    fn numerical_gradient_matches_force() {
        // Central differences of the potential as an independent check.
        for shape in [TrapShape::GaussianBeam, TrapShape::GaussianEllipsoid] {
            let t = trap(shape);
            let r = Vector3::new(40e-9, -30e-9, 120e-9);
            let f = t.force(&r, 1.0);
            for i in 0..3 {
                let h = 1e-12;
                let mut rp = r;
                let mut rm = r;
                rp[i] += h;
                rm[i] -= h;
                let grad = (t.potential(&rp) - t.potential(&rm)) / (2.0 * h);
                assert!(((f[i] + grad) / f[i]).abs() < 1e-5, "{shape:?} axis {i}");
            }
        }
    }

    #[test]
    fn curvature_at_origin_recovers_stiffness() {
        for shape in [TrapShape::GaussianBeam, TrapShape::GaussianEllipsoid] {
            let t = trap(shape);
            for i in 0..3 {
                let h = 1e-12;
                let mut r = Vector3::zeros();
                r[i] = h;
                let fp = t.force(&r, 1.0)[i];
                r[i] = -h;
                let fm = t.force(&r, 1.0)[i];
                let k = -(fp - fm) / (2.0 * h);
                let expected = mass() * t.omega[i].powi(2);
                assert!(((k - expected) / expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ellipsoid_equivalent_displacements_scale_inversely_with_frequency() {
        let t = trap(TrapShape::GaussianEllipsoid);
        let dz = t.equivalent_nonlinearity_displacement(Axis::Z, 0.01).unwrap();
        for axis in [Axis::X, Axis::Y] {
            let d = t.equivalent_nonlinearity_displacement(axis, 0.01).unwrap();
            let ratio = dz / d;
            let expected = t.omega_of(axis) / t.omega[2];
            assert!(((ratio - expected) / expected).abs() < 1e-6, "{ratio} vs {expected}");
        }
    }

    #[test]
    fn lorentzian_beam_has_extra_sqrt_two() {
        let t = trap(TrapShape::GaussianBeam);
        let dz = t.equivalent_nonlinearity_displacement(Axis::Z, 0.005).unwrap();
        let dy = t.equivalent_nonlinearity_displacement(Axis::Y, 0.005).unwrap();
        let expected = t.omega[1] / (2f64.sqrt() * t.omega[2]);
        assert!(((dz / dy - expected) / expected).abs() < 1e-2);
    }

    #[test]
    fn harmonic_trap_reports_no_nonlinearity() {
        let t = trap(TrapShape::Harmonic);
        assert!(t.equivalent_nonlinearity_displacement(Axis::Z, 0.01).is_err());
        assert!(t.anharmonic_deviation(Axis::Z, 1e-6).abs() < 1e-12);
    }

    #[test]
    fn invalid_frequencies_rejected() {
        assert!(TrapField::new(mass(), [1.0, 0.0, 1.0], 1e-19, TrapShape::Harmonic).is_err());
        assert!(TrapField::new(mass(), [1.0, 1.0, 1.0], 0.0, TrapShape::Harmonic).is_err());
    }
}
