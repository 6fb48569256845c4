use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::model::zero_point_motion;
use crate::{Error, Result};

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be >= 0, got {v}")))
    }
}

/// Position variance after a free flight of `tau` from a thermal state,
/// `z_zp^2 (2 n + 1)(1 + Omega^2 tau^2)`.
pub fn free_expansion_variance(nbar: f64, omega: f64, mass: f64, tau: f64) -> Result<f64> {
    non_negative("tau", tau)?;
    non_negative("nbar", nbar)?;
    let zzp = zero_point_motion(mass, omega)?;
    Ok(zzp * zzp * (2.0 * nbar + 1.0) * (1.0 + (omega * tau).powi(2)))
}

/// Mean oscillation energy after release for `tau` under a constant force
/// `f` and recapture.
pub fn mean_energy_after_release(e0: f64, f: f64, tau: f64, omega: f64, mass: f64) -> Result<f64> {
    non_negative("tau", tau)?;
    if !(mass > 0.0) {
        return Err(Error::domain("mass must be > 0"));
    }
    let wt2 = (omega * tau).powi(2);
    Ok(e0 * (1.0 + wt2 / 2.0) + f * f * tau * tau / (2.0 * mass) * (1.0 + wt2 / 4.0))
}

/// Position variance a time `t` after recapture following a free flight of
/// `tau` from an uncorrelated state.
pub fn recapture_variance(
    sigma_z0_sq: f64,
    sigma_p0_sq: f64,
    tau: f64,
    t: f64,
    omega: f64,
    mass: f64,
) -> Result<f64> {
    non_negative("t", t)?;
    non_negative("tau", tau)?;
    Ok(sigma_z0_sq * (1.0 + omega * tau * (2.0 * omega * t).sin())
        + sigma_p0_sq * tau * tau / (mass * mass) * (omega * t).cos().powi(2))
}

/// Maximum of [`recapture_variance`] over `t`.
pub fn recapture_variance_max(sigma_z0_sq: f64, sigma_p0_sq: f64, tau: f64, omega: f64, mass: f64) -> Result<f64> {
    non_negative("tau", tau)?;
    let a = sigma_z0_sq;
    let b = sigma_z0_sq * omega * tau;
    let c = sigma_p0_sq * tau * tau / (mass * mass);
    Ok(a + c / 2.0 + (b * b + c * c / 4.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseAngle {
    /// rad.
    pub theta: f64,
    /// The state is circular and has no principal axis.
    pub degenerate: bool,
}

/// Rotation of the sheared phase-space ellipse against the position axis
/// after a free flight of `tau`.
pub fn ellipse_angle(omega: f64, tau: f64) -> Result<EllipseAngle> {
    non_negative("tau", tau)?;
    let s = omega * tau;
    if s == 0.0 {
        return Ok(EllipseAngle { theta: 0.0, degenerate: true });
    }
    Ok(EllipseAngle { theta: 0.5 * (2.0 * s).atan2(s * s), degenerate: false })
}

/// Trap pulse length that undoes the shear of a free flight `tau`,
/// `2 theta / Omega + n pi / Omega`.
pub fn recompression_time(tau: f64, omega: f64, n: u32) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::domain("omega must be > 0"));
    }
    let th = ellipse_angle(omega, tau)?;
    Ok(2.0 * th.theta / omega + n as f64 * PI / omega)
}

/// Mean displacement after a free flight of `tau` under the force of a
/// voltage error `dv`.
pub fn displacement_from_voltage(cnv: f64, dv: f64, tau: f64, mass: f64) -> Result<f64> {
    non_negative("tau", tau)?;
    Ok(cnv * dv * tau * tau / (2.0 * mass))
}

/// Predicted compensation-scan parabola `a (V - V_opt)^2 + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    /// J/V^2.
    pub a: f64,
    pub v_opt: f64,
    /// J.
    pub b: f64,
}

impl ScanPrediction {
    pub fn energy(&self, v: f64) -> f64 {
        self.a * (v - self.v_opt).powi(2) + self.b
    }

    /// Places the minimum at `v_opt` on top of the released thermal energy `e0`.
    pub fn with_baseline(self, v_opt: f64, e0: f64, omega: f64, tau: f64) -> Self {
        Self { v_opt, b: e0 * (1.0 + (omega * tau).powi(2) / 2.0), ..self }
    }
}

/// Curvature of the scan parabola: the force term of the energy growth with
/// `F = C_NV (V - V_opt)`.
pub fn expected_scan_parabola(cnv: f64, tau: f64, omega: f64, mass: f64) -> Result<ScanPrediction> {
    if !(tau > 0.0) {
        return Err(Error::domain("tau must be > 0"));
    }
    let a = cnv * cnv * tau * tau / (2.0 * mass) * (1.0 + (omega * tau).powi(2) / 4.0);
    Ok(ScanPrediction { a, v_opt: 0.0, b: 0.0 })
}
