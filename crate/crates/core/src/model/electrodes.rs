use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Particle;
use crate::{Error, Result};

/// `C^-1` with every column divided by its own diagonal entry.
///
/// Column `k` is the voltage combination that produces a force along trap
/// axis `k` only, normalised to unit voltage on electrode `k`.
pub fn normalized_inverse(c: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let inv = c
        .try_inverse()
        .ok_or_else(|| Error::Singular("projection matrix is not invertible".into()))?;
    let mut out = inv;
    for k in 0..3 {
        let d = inv[(k, k)];
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Singular(format!(
                "inverse has zero diagonal in column {k}"
            )));
        }
        out.column_mut(k).unscale_mut(d);
        out[(k, k)] = 1.0;
    }
    Ok(out)
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Three electrode pairs and their projection onto the trap axes.
///
/// Row `i` refers to trap axis `i`, column `j` to electrode pair `j`, so the
/// force in the trap basis is `C V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeSystem {
    /// Field at the trap centre per applied volt ((V/m)/V).
    pub geometry: Matrix3<f64>,
    /// Force per volt `C = q e G` (N/V).
    pub transduction: Matrix3<f64>,
    /// `|C_ii|` (N/V).
    pub cnv_diag: [f64; 3],
}

impl ElectrodeSystem {
    pub fn from_geometry(geometry: Matrix3<f64>, particle: &Particle) -> Result<Self> {
        if geometry.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("geometry matrix has non-finite entries"));
        }
        let cond = condition_number(&geometry);
        if !cond.is_finite() || cond > 1e12 {
            return Err(Error::Singular(format!(
                "geometry matrix is ill-conditioned (condition number {cond:e})"
            )));
        }
        let transduction = geometry * particle.charge();
        Ok(Self {
            geometry,
            transduction,
            cnv_diag: [0, 1, 2].map(|i| transduction[(i, i)].abs()),
        })
    }

    /// Builds the system from a measured normalised inverse and the diagonal
    /// transduction magnitudes. The result satisfies
    /// `normalized_inverse(C) == normalized` and `C_ii == cnv_diag[i]`.
    pub fn from_normalized_inverse(
        normalized: &Matrix3<f64>,
        cnv_diag: [f64; 3],
        particle: &Particle,
    ) -> Result<Self> {
        if particle.charge_q == 0 {
            return Err(Error::domain(
                "cannot infer electrode geometry from a neutral particle",
            ));
        }
        if cnv_diag.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::domain("transduction magnitudes must be > 0"));
        }
        let r = normalized
            .try_inverse()
            .ok_or_else(|| Error::Singular("normalised inverse is singular".into()))?;
        // C = diag(cnv / r_ii) r, i.e. rows of r rescaled to the target diagonal.
        let mut c = r;
        for i in 0..3 {
            let s = cnv_diag[i] / r[(i, i)];
            c.row_mut(i).scale_mut(s);
        }
        Self::from_geometry(c / particle.charge(), particle)
    }

    /// Electrodes aligned with the trap axes.
    pub fn diagonal(cnv_diag: [f64; 3], particle: &Particle) -> Result<Self> {
        Self::from_normalized_inverse(&Matrix3::identity(), cnv_diag, particle)
    }

    /// The cross-talk matrix reported for the reference setup.
    pub fn reference_normalized_inverse() -> Matrix3<f64> {
        Matrix3::new(
            1.0, 0.32, -37.0, //
            0.36, 1.0, 4.4, //
            0.0011, -0.0012, 1.0,
        )
    }

    /// Same geometry, transduction rescaled to another particle charge.
    pub fn for_particle(&self, particle: &Particle) -> Self {
        let transduction = self.geometry * particle.charge();
        Self {
            geometry: self.geometry,
            transduction,
            cnv_diag: [0, 1, 2].map(|i| transduction[(i, i)].abs()),
        }
    }

    pub fn force(&self, voltages: &Vector3<f64>) -> Vector3<f64> {
        self.transduction * voltages
    }

    pub fn normalized_inverse(&self) -> Result<Matrix3<f64>> {
        normalized_inverse(&self.transduction)
    }

    /// Voltages that cancel a constant force `f` exactly, `-C^-1 f`.
    pub fn nulling_voltages(&self, f: &Vector3<f64>) -> Result<Vector3<f64>> {
        let inv = self
            .transduction
            .try_inverse()
            .ok_or_else(|| Error::Singular("transduction is singular".into()))?;
        Ok(-(inv * f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consts::E_CHARGE;
    use proptest::prelude::*;

    fn particle() -> Particle {
        Particle::reference()
    }

    #[test]
    fn diagonal_matrix_normalises_to_identity() {
        let c = Matrix3::from_diagonal(&Vector3::new(2e-18, 3e-18, 1e-16));
        let n = normalized_inverse(&c).unwrap();
        assert!((n - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn reference_matrix_round_trips_exactly() {
        let target = ElectrodeSystem::reference_normalized_inverse();
        let e = ElectrodeSystem::from_normalized_inverse(&target, [1e-18, 1e-18, 1e-16], &particle())
            .unwrap();
        let n = e.normalized_inverse().unwrap();
        for (a, b) in n.iter().zip(target.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3), "{n}");
        }
        for i in 0..3 {
            assert!((e.transduction[(i, i)] - [1e-18, 1e-18, 1e-16][i]).abs() < 1e-30);
        }
    }

    #[test]
    fn renormalising_is_idempotent() {
        let n = ElectrodeSystem::reference_normalized_inverse();
        // Denormalise with arbitrary column scales, invert back to a C.
        let scaled = n * Matrix3::from_diagonal(&Vector3::new(3.0, -0.5, 7.0));
        let c = scaled.try_inverse().unwrap();
        let again = normalized_inverse(&c).unwrap();
        assert!((again - n).abs().max() < 1e-10);
    }

    #[test]
    fn singular_input_is_an_error() {
        let c = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(normalized_inverse(&c).is_err());
        assert!(ElectrodeSystem::from_geometry(c, &particle()).is_err());
    }

    #[test]
    fn unit_volt_on_x_gives_first_column() {
        let g = Matrix3::new(1.0, 0.2, 0.1, 0.3, 1.5, -0.2, 0.05, 0.1, 12.0);
        let e = ElectrodeSystem::from_geometry(g, &particle()).unwrap();
        let f = e.force(&Vector3::x());
        let expected = g.column(0) * 45.0 * E_CHARGE;
        assert!((f - expected).abs().max() < 1e-32);
    }

    proptest! {
        #[test]
        fn charge_scaling_is_linear_and_leaves_normalisation_unchanged(
            q in 1i64..200, k in 2i64..5,
            off in prop::array::uniform6(-0.3f64..0.3),
        ) {
            let g = Matrix3::new(
                1.0, off[0], off[1],
                off[2], 1.0, off[3],
                off[4], off[5], 10.0,
            );
            let p1 = particle().with_charge(q);
            let p2 = particle().with_charge(q * k);
            let e1 = ElectrodeSystem::from_geometry(g, &p1).unwrap();
            let e2 = e1.for_particle(&p2);
            for (a, b) in e1.transduction.iter().zip(e2.transduction.iter()) {
                prop_assert!((b - a * k as f64).abs() <= 1e-12 * b.abs());
            }
            let n1 = e1.normalized_inverse().unwrap();
            let n2 = e2.normalized_inverse().unwrap();
            prop_assert!((n1 - n2).abs().max() < 1e-12);
        }

        #[test]
        fn stray_field_nulling_voltage_is_charge_independent(
            q in 1i64..200,
            ex in -50f64..50.0, ey in -50f64..50.0, ez in -50f64..50.0,
        ) {
            let g = Matrix3::new(2.0, 0.1, -0.3, 0.2, 1.8, 0.4, 0.01, -0.02, 14.0);
            let stray = Vector3::new(ex, ey, ez);
            let v = |q: i64| {
                let p = particle().with_charge(q);
                let e = ElectrodeSystem::from_geometry(g, &p).unwrap();
                e.nulling_voltages(&(stray * p.charge())).unwrap()
            };
            let (v1, v2) = (v(q), v(2 * q));
            prop_assert!((v1 - v2).abs().max() <= 1e-9 * (1.0 + v1.abs().max()));
            // the gravity contribution scales as 1/q
            let mg = Vector3::new(0.0, 0.0, -3.9e-17);
            let w = |q: i64| {
                let p = particle().with_charge(q);
                let e = ElectrodeSystem::from_geometry(g, &p).unwrap();
                e.nulling_voltages(&mg).unwrap()
            };
            let (w1, w2) = (w(q), w(2 * q));
            prop_assert!((w1 - 2.0 * w2).abs().max() <= 1e-9 * w1.abs().max());
        }
    }
}
