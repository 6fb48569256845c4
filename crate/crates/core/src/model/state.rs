use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Phase-space point `(r, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub position: Vector3<f64>,
    pub momentum: Vector3<f64>,
}

impl StateVector {
    pub fn new(position: Vector3<f64>, momentum: Vector3<f64>) -> Self {
        Self { position, momentum }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.momentum.iter()).all(|v| v.is_finite())
    }

    /// `(x, y, z, px, py, pz)`.
    pub fn as_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.momentum.x,
            self.momentum.y,
            self.momentum.z,
        )
    }
}

/// Second moments of a Gaussian phase-space state over
/// `(x, y, z, px, py, pz)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceState {
    pub sigma: Matrix6<f64>,
}

impl CovarianceState {
    /// Validates symmetry and positive semi-definiteness.
    ///
    /// Entries mix m^2 and (kg m/s)^2, so definiteness is checked on the
    /// diagonally rescaled (correlation) matrix.
    pub fn new(sigma: Matrix6<f64>) -> Result<Self> {
        let state = Self { sigma };
        state.check()?;
        Ok(state)
    }

    /// Uncorrelated thermal state from per-axis position and momentum variances.
    pub fn diagonal(position_var: [f64; 3], momentum_var: [f64; 3]) -> Result<Self> {
        let mut sigma = Matrix6::zeros();
        for i in 0..3 {
            sigma[(i, i)] = position_var[i];
            sigma[(i + 3, i + 3)] = momentum_var[i];
        }
        Self::new(sigma)
    }

    pub fn check(&self) -> Result<()> {
        let s = &self.sigma;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("covariance has non-finite entries".into()));
        }
        for i in 0..6 {
            if s[(i, i)] < 0.0 {
                return Err(Error::Numerical(format!("negative variance in entry {i}")));
            }
            for j in (i + 1)..6 {
                let scale = (s[(i, i)] * s[(j, j)]).sqrt().max(f64::MIN_POSITIVE);
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Numerical(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let min = self.min_normalized_eigenvalue();
        if min < -1e-12 * 6.0 {
            return Err(Error::Numerical(format!(
                "covariance not positive semi-definite (normalised eigenvalue {min:e})"
            )));
        }
        Ok(())
    }

    /// Smallest eigenvalue of `D^-1/2 Sigma D^-1/2`, `D = diag(Sigma)`.
    pub fn min_normalized_eigenvalue(&self) -> f64 {
        let d: Vec<f64> = (0..6)
            .map(|i| {
                let v = self.sigma[(i, i)];
                if v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let scaled = Matrix6::from_fn(|i, j| {
            let v = self.sigma[(i, j)] * d[i] * d[j];
            if i == j && self.sigma[(i, i)] <= 0.0 {
                0.0
            } else {
                v
            }
        });
        let sym = (scaled + scaled.transpose()) * 0.5;
        SymmetricEigen::new(sym).eigenvalues.min()
    }

    pub fn position_variance(&self, axis: usize) -> f64 {
        self.sigma[(axis, axis)]
    }

    pub fn momentum_variance(&self, axis: usize) -> f64 {
        self.sigma[(axis + 3, axis + 3)]
    }

    /// The 2x2 `(r_i, p_i)` block of one axis.
    pub fn axis_block(&self, axis: usize) -> [[f64; 2]; 2] {
        let (r, p) = (axis, axis + 3);
        [
            [self.sigma[(r, r)], self.sigma[(r, p)]],
            [self.sigma[(p, r)], self.sigma[(p, p)]],
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let mut s = Matrix6::identity();
        s[(0, 3)] = 0.5;
        assert!(CovarianceState::new(s).is_err());
        s[(3, 0)] = 0.5;
        assert!(CovarianceState::new(s).is_ok());
        s[(0, 3)] = 2.0;
        s[(3, 0)] = 2.0;
        assert!(CovarianceState::new(s).is_err());
    }

    #[test]
    fn mixed_units_do_not_confuse_definiteness() {
        let st = CovarianceState::diagonal([1e-21; 3], [1e-44; 3]).unwrap();
        assert!(st.min_normalized_eigenvalue() > 0.99);
    }
}
