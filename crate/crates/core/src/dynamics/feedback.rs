use std::collections::VecDeque;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::DetectorModel;
use crate::model::{Axis, ElectrodeSystem};
use crate::{Error, Result};

/// Cold-damping loop for one trap axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisFeedback {
    pub enabled: bool,
    /// Damping-rate equivalent (1/s).
    pub gain: f64,
    pub routing_electrode: Axis,
    /// Velocity-estimator bandwidth (Hz).
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    /// Additional loop latency (s).
    #[serde(default)]
    pub extra_delay: f64,
    /// 180 degree phase flip.
    #[serde(default)]
    pub inverted: bool,
}

fn default_bandwidth() -> f64 {
    2e6
}

impl AxisFeedback {
    pub fn new(axis: Axis, gain: f64) -> Self {
        Self {
            enabled: true,
            gain,
            routing_electrode: axis,
            bandwidth: default_bandwidth(),
            extra_delay: 0.0,
            inverted: false,
        }
    }

    pub fn disabled(axis: Axis) -> Self {
        Self { enabled: false, ..Self::new(axis, 0.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    pub axes: [AxisFeedback; 3],
}

impl FeedbackConfig {
    pub fn new(gains: [f64; 3]) -> Self {
        Self { axes: [0, 1, 2].map(|i| AxisFeedback::new(Axis::ALL[i], gains[i])) }
    }

    pub fn off() -> Self {
        Self { axes: Axis::ALL.map(AxisFeedback::disabled) }
    }

    pub fn axis(&self, axis: Axis) -> &AxisFeedback {
        &self.axes[axis.index()]
    }

    pub fn axis_mut(&mut self, axis: Axis) -> &mut AxisFeedback {
        &mut self.axes[axis.index()]
    }

    pub fn validate(&self, omega: &[f64; 3]) -> Result<()> {
        for (i, a) in self.axes.iter().enumerate() {
            let name = Axis::ALL[i];
            if !(a.gain >= 0.0) || !a.gain.is_finite() {
                return Err(Error::domain(format!("feedback.{name}: gain must be >= 0")));
            }
            if !(a.extra_delay >= 0.0) {
                return Err(Error::domain(format!("feedback.{name}: delay must be >= 0")));
            }
            if a.enabled && !(a.bandwidth * 2.0 * std::f64::consts::PI > omega[i]) {
                return Err(Error::domain(format!(
                    "feedback.{name}: bandwidth must exceed the mechanical frequency"
                )));
            }
        }
        Ok(())
    }
}

/// Running state of the velocity-feedback loops.
///
/// The velocity of axis `i` is estimated from detector channel `i` by a
/// backward difference followed by a one-pole low-pass. The controller only
/// knows the nominal transduction `C_ii` of the axis it cools; the voltage
/// is put on the routing electrode regardless, so the force actually
/// produced is `C V` with all cross-talk.
#[derive(Debug, Clone)]
pub struct FeedbackController {
    loops: [Loop; 3],
}

#[derive(Debug, Clone)]
struct Loop {
    active: bool,
    electrode: usize,
    /// Volts of command per metre/second of estimated velocity.
    volts_per_velocity: f64,
    metres_per_volt: f64,
    alpha: f64,
    last_reading: Option<f64>,
    velocity: f64,
    delay: VecDeque<f64>,
    delay_len: usize,
}

impl FeedbackController {
    pub fn new(
        cfg: &FeedbackConfig,
        detectors: &DetectorModel,
        electrodes: &ElectrodeSystem,
        mass: f64,
    ) -> Self {
        let h = 1.0 / detectors.sample_rate;
        let loops = [0, 1, 2].map(|i| {
            let a = &cfg.axes[i];
            let c_ii = electrodes.transduction[(i, i)];
            let sign = if a.inverted { -1.0 } else { 1.0 };
            let active = a.enabled && a.gain > 0.0 && c_ii != 0.0;
            let delay_len = (a.extra_delay / h).round() as usize;
            Loop {
                active,
                electrode: a.routing_electrode.index(),
                volts_per_velocity: if active { -sign * mass * a.gain / c_ii } else { 0.0 },
                metres_per_volt: 1.0 / detectors.channels[i].axis_gain(i),
                alpha: 1.0 - (-2.0 * std::f64::consts::PI * a.bandwidth * h).exp(),
                last_reading: None,
                velocity: 0.0,
                delay: VecDeque::with_capacity(delay_len + 1),
                delay_len,
            }
        });
        Self { loops }
    }

    pub fn any_active(&self) -> bool {
        self.loops.iter().any(|l| l.active)
    }

    /// Consumes one detector sample per channel and returns the electrode
    /// voltages to hold until the next sample. With `enabled` false the
    /// estimators keep tracking but the command is zero.
    pub fn update(&mut self, readings: &[f64; 3], h: f64, enabled: bool) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for (i, l) in self.loops.iter_mut().enumerate() {
            if !l.active {
                continue;
            }
            let x = readings[i] * l.metres_per_volt;
            let raw = match l.last_reading {
                Some(prev) => (x - prev) / h,
                None => 0.0,
            };
            l.last_reading = Some(x);
            l.velocity += l.alpha * (raw - l.velocity);
            let mut cmd = l.volts_per_velocity * l.velocity;
            if l.delay_len > 0 {
                l.delay.push_back(cmd);
                cmd = if l.delay.len() > l.delay_len { l.delay.pop_front().unwrap() } else { 0.0 };
            }
            if enabled {
                v[l.electrode] += cmd;
            }
        }
        v
    }
}

/// Voltage and force of a velocity-feedback command for given velocity
/// estimates.
pub fn cold_damping_force(
    velocity_estimates: &Vector3<f64>,
    cfg: &FeedbackConfig,
    electrodes: &ElectrodeSystem,
    mass: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let mut v = Vector3::zeros();
    for (i, a) in cfg.axes.iter().enumerate() {
        let c_ii = electrodes.transduction[(i, i)];
        if !a.enabled || c_ii == 0.0 {
            continue;
        }
        let sign = if a.inverted { -1.0 } else { 1.0 };
        v[a.routing_electrode.index()] += -sign * mass * a.gain * velocity_estimates[i] / c_ii;
    }
    (v, electrodes.force(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Particle;
    use nalgebra::Matrix3;

    #[test]
    fn zero_velocity_gives_zero_command() {
        let p = Particle::reference();
        let e = ElectrodeSystem::diagonal([1e-18, 1e-18, 1e-16], &p).unwrap();
        let (v, f) = cold_damping_force(&Vector3::zeros(), &FeedbackConfig::new([1.0; 3]), &e, p.mass);
        assert_eq!(v, Vector3::zeros());
        assert_eq!(f, Vector3::zeros());
    }

    #[test]
    fn intended_force_on_own_axis() {
        let p = Particle::reference();
        let e = ElectrodeSystem::diagonal([1e-18, 1e-18, 1e-16], &p).unwrap();
        let vel = Vector3::new(1e-3, -2e-3, 5e-4);
        let (_, f) = cold_damping_force(&vel, &FeedbackConfig::new([10.0, 20.0, 30.0]), &e, p.mass);
        let want = Vector3::new(-10.0 * 1e-3, 20.0 * 2e-3, -30.0 * 5e-4) * p.mass;
        assert!((f - want).norm() < 1e-12 * want.norm());
    }

    #[test]
    fn rerouting_scales_by_cross_talk() {
        let p = Particle::reference();
        let g = Matrix3::new(1.0, 0.3, 0.1, -0.2, 1.0, 0.2, 0.05, 0.02, 10.0);
        let e = ElectrodeSystem::from_geometry(g, &p).unwrap();
        let mut cfg = FeedbackConfig::off();
        cfg.axes[0] = AxisFeedback { routing_electrode: Axis::Y, ..AxisFeedback::new(Axis::X, 5.0) };
        let vel = Vector3::new(1e-3, 0.0, 0.0);
        let (_, f) = cold_damping_force(&vel, &cfg, &e, p.mass);
        let direct = -5.0 * p.mass * 1e-3;
        let c = e.transduction;
        assert!((f.x / direct - c[(0, 1)] / c[(0, 0)]).abs() < 1e-12);
    }
}
