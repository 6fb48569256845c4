//! Physical configuration and the deterministic force field.

mod electrodes;
mod environment;
mod force;
mod particle;
mod state;
mod trap;

use serde::{Deserialize, Serialize};

pub use electrodes::{normalized_inverse, ElectrodeSystem};
pub use environment::{epstein_damping, ChargeDrift, Environment};
pub use force::{total_force, ForceInputs};
pub use particle::{derive_mass, zero_point_motion, Particle};
pub use state::{CovarianceState, StateVector};
pub use trap::{TrapField, TrapShape};

/// A trap axis. `Z` is the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Axis::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(crate::Error::Config(format!("unknown axis `{other}`"))),
        }
    }
}
