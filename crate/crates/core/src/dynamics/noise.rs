use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute white noise of one supply output range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplyRange {
    /// Largest |V| served by this range.
    pub max_volts: f64,
    /// V/sqrt(Hz).
    pub asd: f64,
}

/// Electrode supply noise: `V = V_dc + white(range) + V_dc * fractional`.
///
/// The fractional part is an amplitude spectral density (1/sqrt(Hz)) that
/// is flat up to `fractional_cutoff` and realised as an Ornstein-Uhlenbeck
/// process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplyNoise {
    #[serde(default)]
    pub ranges: Vec<SupplyRange>,
    #[serde(default = "default_fractional")]
    pub fractional_asd: f64,
    #[serde(default = "default_cutoff")]
    pub fractional_cutoff: f64,
}

fn default_fractional() -> f64 {
    1e-6
}
fn default_cutoff() -> f64 {
    1e6
}

impl Default for SupplyNoise {
    fn default() -> Self {
        Self { ranges: Vec::new(), fractional_asd: default_fractional(), fractional_cutoff: default_cutoff() }
    }
}

impl SupplyNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.fractional_asd >= 0.0) || !(self.fractional_cutoff > 0.0) {
            return Err(Error::domain("supply noise: fractional asd must be >= 0 and cutoff > 0"));
        }
        let mut last = 0.0;
        for r in &self.ranges {
            if !(r.max_volts > last) || !(r.asd >= 0.0) {
                return Err(Error::domain("supply noise: ranges must be increasing with asd >= 0"));
            }
            last = r.max_volts;
        }
        Ok(())
    }

    pub fn absolute_asd(&self, volts: f64) -> f64 {
        let v = volts.abs();
        self.ranges
            .iter()
            .find(|r| v <= r.max_volts)
            .or(self.ranges.last())
            .map_or(0.0, |r| r.asd)
    }
}

/// Per-sample realisation of [`SupplyNoise`] for three electrodes.
#[derive(Debug, Clone)]
pub(crate) struct SupplyNoiseState {
    sign: f64,
    white_scale: f64,
    decay: f64,
    kick: f64,
    ou: Vector3<f64>,
}

impl SupplyNoiseState {
    pub fn new<R: Rng + ?Sized>(noise: &SupplyNoise, h: f64, sign: f64, rng: &mut R) -> Self {
        let lambda = 2.0 * std::f64::consts::PI * noise.fractional_cutoff;
        // One-sided asd^2 flat to the cutoff: stationary variance asd^2 lambda / 4.
        let var = noise.fractional_asd.powi(2) * lambda / 4.0;
        let decay = (-lambda * h).exp();
        let sd = var.sqrt();
        let ou = Vector3::from_fn(|_, _| sign * sd * rng.sample::<f64, _>(StandardNormal));
        Self {
            sign,
            white_scale: (1.0 / (2.0 * h)).sqrt(),
            decay,
            kick: (var * (1.0 - decay * decay)).sqrt(),
            ou,
        }
    }

    /// Noisy voltages for the next sample interval.
    pub fn apply<R: Rng + ?Sized>(&mut self, noise: &SupplyNoise, dc: &Vector3<f64>, rng: &mut R) -> Vector3<f64> {
        let mut out = *dc;
        for k in 0..3 {
            self.ou[k] = self.ou[k] * self.decay + self.sign * self.kick * rng.sample::<f64, _>(StandardNormal);
            let white = noise.absolute_asd(dc[k]) * self.white_scale;
            out[k] += dc[k] * self.ou[k];
            if white > 0.0 {
                out[k] += self.sign * white * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    }
}
