use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Something that happens at a scheduled time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "volts", rename_all = "snake_case")]
pub enum Action {
    TrapOff,
    TrapOn,
    FeedbackOff,
    FeedbackOn,
    SetDcVoltages([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub action: Action,
}

/// Timed trap, feedback and voltage events.
///
/// The trap and the feedback start switched on. Trap commands take effect
/// after `trap_trigger_delay` and ramp linearly over `trap_rise_fall`;
/// feedback commands take effect after `feedback_switch_delay`; voltage
/// changes are immediate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSchedule {
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default = "default_rise_fall")]
    pub trap_rise_fall: f64,
    #[serde(default = "default_trigger_delay")]
    pub trap_trigger_delay: f64,
    #[serde(default = "default_feedback_delay")]
    pub feedback_switch_delay: f64,
    pub total_duration: f64,
}

fn default_rise_fall() -> f64 {
    170e-9
}
fn default_trigger_delay() -> f64 {
    380e-9
}
fn default_feedback_delay() -> f64 {
    50e-9
}

impl PulseSchedule {
    /// Trap and feedback on for the whole duration.
    pub fn steady(total_duration: f64) -> Self {
        Self {
            events: Vec::new(),
            trap_rise_fall: default_rise_fall(),
            trap_trigger_delay: default_trigger_delay(),
            feedback_switch_delay: default_feedback_delay(),
            total_duration,
        }
    }

    pub fn with_event(mut self, time: f64, action: Action) -> Self {
        self.events.push(Event { time, action });
        self
    }

    /// Release at `t_release` for a free flight of `tau`: feedback off, trap
    /// off, trap back on, feedback on. Feedback stays off for `hold_off`
    /// after recapture.
    pub fn release_recapture(t_release: f64, tau: f64, hold_off: f64, total_duration: f64) -> Self {
        let mut s = Self::steady(total_duration);
        // Feedback is cut just before the trap is switched so that its
        // transient does not kick the free particle.
        s.events.push(Event { time: t_release - 1e-6, action: Action::FeedbackOff });
        s.events.push(Event { time: t_release, action: Action::TrapOff });
        s.events.push(Event { time: t_release + tau, action: Action::TrapOn });
        if hold_off.is_finite() {
            s.events.push(Event { time: t_release + tau + hold_off, action: Action::FeedbackOn });
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Schedule(m.to_string()));
        if !(self.total_duration > 0.0) || !self.total_duration.is_finite() {
            return bad("total duration must be > 0");
        }
        if !(self.trap_rise_fall >= 0.0) || !(self.trap_trigger_delay >= 0.0) || !(self.feedback_switch_delay >= 0.0) {
            return bad("switching delays must be >= 0");
        }
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if !e.time.is_finite() || e.time < 0.0 {
                return bad("event times must be finite and >= 0");
            }
            if e.time <= last {
                return Err(Error::Schedule(format!(
                    "event times must be strictly increasing ({} after {})",
                    e.time, last
                )));
            }
            if let Action::SetDcVoltages(v) = e.action {
                if v.iter().any(|x| !x.is_finite()) {
                    return bad("voltages must be finite");
                }
            }
            last = e.time;
        }
        if self.total_duration < last {
            return bad("total duration ends before the last event");
        }
        Ok(())
    }

    /// Trap envelope in `[0, 1]` at time `t`.
    pub fn envelope(&self, t: f64) -> f64 {
        self.timeline(Vector3::zeros()).envelope_at(t)
    }

    pub(crate) fn timeline(&self, dc0: Vector3<f64>) -> Timeline {
        let mut ramps = Vec::new();
        let mut feedback = Vec::new();
        let mut dc = Vec::new();
        for e in &self.events {
            match e.action {
                Action::TrapOff | Action::TrapOn => {
                    let target = if e.action == Action::TrapOn { 1.0 } else { 0.0 };
                    let start = e.time + self.trap_trigger_delay;
                    let here = ramp_level(&ramps, self.trap_rise_fall, start, 1.0);
                    ramps.push(Ramp { start, from: here, to: target });
                }
                Action::FeedbackOff => feedback.push((e.time + self.feedback_switch_delay, false)),
                Action::FeedbackOn => feedback.push((e.time + self.feedback_switch_delay, true)),
                Action::SetDcVoltages(v) => dc.push((e.time, Vector3::from(v))),
            }
        }
        // Delays can reorder feedback and trap effects but never feedback
        // among itself; keep the list sorted anyway.
        feedback.sort_by(|a, b| a.0.total_cmp(&b.0));
        Timeline { ramps, rise_fall: self.trap_rise_fall, feedback, dc, dc0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ramp {
    start: f64,
    from: f64,
    to: f64,
}

fn ramp_eval(r: &Ramp, rise_fall: f64, t: f64) -> f64 {
    let dt = t - r.start;
    if rise_fall <= 0.0 {
        return r.to;
    }
    let step = dt / rise_fall;
    if r.to >= r.from {
        (r.from + step).min(r.to)
    } else {
        (r.from - step).max(r.to)
    }
}

fn ramp_level(ramps: &[Ramp], rise_fall: f64, t: f64, initial: f64) -> f64 {
    match ramps.iter().rev().find(|r| r.start <= t) {
        Some(r) => ramp_eval(r, rise_fall, t),
        None => initial,
    }
}

/// Piecewise description of a schedule used by the integrator.
#[derive(Debug, Clone)]
pub(crate) struct Timeline {
    ramps: Vec<Ramp>,
    rise_fall: f64,
    feedback: Vec<(f64, bool)>,
    dc: Vec<(f64, Vector3<f64>)>,
    dc0: Vector3<f64>,
}

impl Timeline {
    pub fn envelope_at(&self, t: f64) -> f64 {
        ramp_level(&self.ramps, self.rise_fall, t, 1.0)
    }

    pub fn feedback_at(&self, t: f64) -> bool {
        self.feedback.iter().rev().find(|f| f.0 <= t).map_or(true, |f| f.1)
    }

    pub fn dc_at(&self, t: f64) -> Vector3<f64> {
        self.dc.iter().rev().find(|d| d.0 <= t).map_or(self.dc0, |d| d.1)
    }

    /// Times at which the envelope changes slope.
    pub fn envelope_breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.ramps.len());
        for r in &self.ramps {
            out.push(r.start);
            out.push(r.start + (r.to - r.from).abs() * self.rise_fall);
        }
        out
    }

    pub fn feedback_switches(&self) -> impl Iterator<Item = f64> + '_ {
        self.feedback.iter().map(|f| f.0)
    }

    pub fn dc_switches(&self) -> impl Iterator<Item = f64> + '_ {
        self.dc.iter().map(|d| d.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_follows_delayed_ramps() {
        let s = PulseSchedule::steady(50e-6)
            .with_event(10e-6, Action::TrapOff)
            .with_event(20e-6, Action::TrapOn);
        let off = 10e-6 + 380e-9;
        let on = 20e-6 + 380e-9;
        assert_eq!(s.envelope(off - 1e-9), 1.0);
        assert!((s.envelope(off + 85e-9) - 0.5).abs() < 1e-9);
        assert_eq!(s.envelope(off + 171e-9), 0.0);
        assert_eq!(s.envelope(on - 1e-9), 0.0);
        assert!((s.envelope(on + 17e-9) - 0.1).abs() < 1e-9);
        assert_eq!(s.envelope(on + 200e-9), 1.0);
    }

    #[test]
    fn interrupted_ramp_is_continuous() {
        let s = PulseSchedule::steady(5e-6)
            .with_event(1e-6, Action::TrapOff)
            .with_event(1.1e-6, Action::TrapOn);
        let t = 1.1e-6 + 380e-9;
        let before = s.envelope(t - 1e-15);
        let after = s.envelope(t + 1e-15);
        assert!((before - after).abs() < 1e-6);
        assert!(before > 0.3 && before < 0.5);
        assert_eq!(s.envelope(t + 170e-9), 1.0);
    }

    #[test]
    fn validation() {
        let s = PulseSchedule::steady(1e-6)
            .with_event(2e-7, Action::TrapOff)
            .with_event(2e-7, Action::TrapOn);
        assert!(s.validate().is_err());
        assert!(PulseSchedule::steady(1e-6).with_event(2e-6, Action::TrapOff).validate().is_err());
        assert!(PulseSchedule::steady(1e-6).validate().is_ok());
    }

    #[test]
    fn feedback_and_voltage_lookup() {
        let s = PulseSchedule::steady(10e-6)
            .with_event(1e-6, Action::FeedbackOff)
            .with_event(2e-6, Action::SetDcVoltages([1.0, 2.0, 3.0]))
            .with_event(3e-6, Action::FeedbackOn);
        let tl = s.timeline(Vector3::new(0.5, 0.0, 0.0));
        assert!(tl.feedback_at(1.04e-6));
        assert!(!tl.feedback_at(1.06e-6));
        assert!(tl.feedback_at(3.06e-6));
        assert_eq!(tl.dc_at(1.9e-6).x, 0.5);
        assert_eq!(tl.dc_at(2.0e-6).z, 3.0);
    }
}
