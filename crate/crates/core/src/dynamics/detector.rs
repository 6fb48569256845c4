use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One detection channel. Channel `k` of a [`DetectorModel`] is the one
/// dominated by trap axis `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorChannel {
    /// V/m.
    pub gain: f64,
    pub sensitivity_weights: [f64; 3],
    /// One-sided white noise, V^2/Hz.
    pub noise_psd: f64,
}

impl DetectorChannel {
    pub fn noiseless_signal(&self, r: &Vector3<f64>) -> f64 {
        self.gain * Vector3::from(self.sensitivity_weights).dot(r)
    }

    /// Per-sample noise standard deviation at the given sample rate.
    pub fn noise_std(&self, sample_rate: f64) -> f64 {
        (self.noise_psd * sample_rate / 2.0).sqrt()
    }

    /// Volts per metre of motion along `axis`, as used for calibration.
    pub fn axis_gain(&self, axis: usize) -> f64 {
        self.gain * self.sensitivity_weights[axis]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    /// x-, y- and z-dominated channels, in that order.
    pub channels: [DetectorChannel; 3],
    /// Hz.
    pub sample_rate: f64,
}

impl DetectorModel {
    /// Forward-scattering radial channels and a homodyne axial channel.
    pub fn reference() -> Self {
        let radial = |w: [f64; 3]| DetectorChannel {
            gain: 1e6,
            sensitivity_weights: w,
            noise_psd: 1e-14,
        };
        Self {
            channels: [
                radial([1.0, 0.05, 0.05]),
                radial([0.05, 1.0, 0.05]),
                DetectorChannel {
                    gain: 1e7,
                    sensitivity_weights: [0.01, 0.01, 1.0],
                    noise_psd: 1e-13,
                },
            ],
            sample_rate: 20e6,
        }
    }

    pub fn ideal(sample_rate: f64) -> Self {
        let ch = |k: usize| {
            let mut w = [0.0; 3];
            w[k] = 1.0;
            DetectorChannel { gain: 1.0, sensitivity_weights: w, noise_psd: 0.0 }
        };
        Self { channels: [ch(0), ch(1), ch(2)], sample_rate }
    }

    pub fn validate(&self, max_omega: f64) -> Result<()> {
        let f_max = max_omega / (2.0 * std::f64::consts::PI);
        if !(self.sample_rate >= 10.0 * f_max) || !self.sample_rate.is_finite() {
            return Err(Error::domain(format!(
                "sample rate {} Hz is below 10x the highest mechanical frequency ({f_max:.0} Hz)",
                self.sample_rate
            )));
        }
        for (k, c) in self.channels.iter().enumerate() {
            if !c.gain.is_finite() || c.gain == 0.0 {
                return Err(Error::domain(format!("detector channel {k}: gain must be non-zero")));
            }
            if !(c.noise_psd >= 0.0) {
                return Err(Error::domain(format!("detector channel {k}: noise psd must be >= 0")));
            }
            if c.sensitivity_weights.iter().any(|w| !w.is_finite()) || c.sensitivity_weights[k] == 0.0 {
                return Err(Error::domain(format!(
                    "detector channel {k}: must be sensitive to its own axis"
                )));
            }
        }
        Ok(())
    }
}
