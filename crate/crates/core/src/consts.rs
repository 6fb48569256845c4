//! Physical constants (CODATA 2018, exact where defined).

/// Reduced Planck constant (J s).
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant (J/K).
pub const KB: f64 = 1.380_649e-23;
/// Elementary charge (C).
pub const E_CHARGE: f64 = 1.602_176_634e-19;
/// Standard gravity (m/s^2).
pub const G_STANDARD: f64 = 9.806_65;
/// Mass of an N2 molecule (kg), used by the free-molecular drag helper.
pub const M_N2: f64 = 4.652_e-26;
