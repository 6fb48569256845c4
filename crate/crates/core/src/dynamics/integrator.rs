use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::noise::SupplyNoiseState;
use super::schedule::Timeline;
use super::{sample_thermal_state, FeedbackController, PulseSchedule};
use crate::model::{StateVector, TrapField};
use crate::rng::{stream, SimRng};
use crate::{Error, Result, SimConfig};

/// Instantaneous inputs for a single [`step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInputs {
    pub envelope: f64,
    pub voltages: Vector3<f64>,
    pub feedback_force: Vector3<f64>,
}

impl Default for StepInputs {
    fn default() -> Self {
        Self { envelope: 1.0, voltages: Vector3::zeros(), feedback_force: Vector3::zeros() }
    }
}

/// Splitting integrator for one fixed step: half kick, half drift, exact
/// Ornstein-Uhlenbeck update of the momentum, half drift, half kick.
///
/// Without forces the position update is exact for any step; with damping
/// and noise the momentum statistics of the free particle are exact too.
#[derive(Debug, Clone)]
pub struct Integrator {
    trap: TrapField,
    inv_mass: f64,
    dt: f64,
    damp: f64,
    gas_var: [f64; 3],
    recoil_var: [f64; 3],
    sd_on: [f64; 3],
    sd_off: [f64; 3],
    noisy: bool,
}

impl Integrator {
    pub fn new(cfg: &SimConfig, dt: f64) -> Self {
        let env = &cfg.environment;
        let m = cfg.particle.mass;
        let g = env.gamma;
        let ou = |d: f64| {
            if g > 0.0 {
                d / (2.0 * g) * -(-2.0 * g * dt).exp_m1()
            } else {
                d * dt
            }
        };
        let gas_d = env.diffusion(m, 0.0);
        let gas_var = gas_d.map(ou);
        let recoil_var = env.recoil_dp.map(ou);
        let sd_on = [0, 1, 2].map(|i| (gas_var[i] + recoil_var[i]).sqrt());
        let sd_off = gas_var.map(f64::sqrt);
        Self {
            trap: cfg.trap.clone(),
            inv_mass: 1.0 / m,
            dt,
            damp: (-g * dt).exp(),
            gas_var,
            recoil_var,
            sd_on,
            sd_off,
            noisy: sd_on.iter().any(|s| *s > 0.0),
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances by one step. `env0`/`ext0` are the trap envelope and the
    /// non-trap force at the start of the step, `env1`/`ext1` at its end.
    #[inline]
    pub fn advance<R: Rng + ?Sized>(
        &self,
        s: &mut StateVector,
        env0: f64,
        env1: f64,
        ext0: &Vector3<f64>,
        ext1: &Vector3<f64>,
        rng: &mut R,
    ) {
        self.advance_signed(s, env0, env1, ext0, ext1, 1.0, rng)
    }

    /// [`Integrator::advance`] with every Gaussian draw multiplied by
    /// `noise_sign` (antithetic runs use -1).
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn advance_signed<R: Rng + ?Sized>(
        &self,
        s: &mut StateVector,
        env0: f64,
        env1: f64,
        ext0: &Vector3<f64>,
        ext1: &Vector3<f64>,
        noise_sign: f64,
        rng: &mut R,
    ) {
        let half = 0.5 * self.dt;
        let drift = half * self.inv_mass;
        s.momentum += (self.trap.force(&s.position, env0) + ext0) * half;
        s.position += s.momentum * drift;
        s.momentum *= self.damp;
        if self.noisy {
            let env_mid = 0.5 * (env0 + env1);
            let sd = if env_mid >= 1.0 {
                self.sd_on
            } else if env_mid <= 0.0 {
                self.sd_off
            } else {
                [0, 1, 2].map(|i| (self.gas_var[i] + self.recoil_var[i] * env_mid).sqrt())
            };
            for (i, sd) in sd.iter().enumerate() {
                if *sd > 0.0 {
                    s.momentum[i] += noise_sign * sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        s.position += s.momentum * drift;
        s.momentum += (self.trap.force(&s.position, env1) + ext1) * half;
    }
}

/// One integration step of the Langevin equation with all inputs held.
pub fn step<R: Rng + ?Sized>(
    state: &StateVector,
    cfg: &SimConfig,
    inputs: &StepInputs,
    dt: f64,
    rng: &mut R,
) -> Result<StateVector> {
    if !(dt > 0.0) || dt * cfg.trap.omega_max() > 0.1 {
        return Err(Error::domain(format!("step: dt * omega_max must be in (0, 0.1], dt = {dt:e}")));
    }
    if !(0.0..=1.0).contains(&inputs.envelope) {
        return Err(Error::domain("step: envelope must lie in [0, 1]"));
    }
    let integ = Integrator::new(cfg, dt);
    let ext = cfg.static_force(&inputs.voltages) + inputs.feedback_force;
    let mut s = *state;
    integ.advance(&mut s, inputs.envelope, inputs.envelope, &ext, &ext, rng);
    if !s.is_finite() {
        return Err(Error::Numerical(format!(
            "integrator produced a non-finite state from r = {:?}, p = {:?}",
            state.position.as_slice(),
            state.momentum.as_slice()
        )));
    }
    Ok(s)
}

/// Sinusoidal voltage added to the electrodes, `amplitude * sin(2 pi f t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub amplitude: [f64; 3],
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

impl Drive {
    fn at(&self, t: f64) -> Vector3<f64> {
        Vector3::from(self.amplitude) * (2.0 * std::f64::consts::PI * self.frequency * t + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Start here instead of sampling the thermal state of the configured
    /// occupations.
    pub initial: Option<StateVector>,
    /// Store the phase-space states (detector channels are always stored).
    pub record_states: bool,
    /// Samples before this time are not stored.
    pub record_start: f64,
    pub drive: Option<Drive>,
    /// Negate every Gaussian draw, including the thermal initial state.
    /// Paired with a normal run on the same stream this gives antithetic
    /// repetitions.
    pub antithetic: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { initial: None, record_states: true, record_start: 0.0, drive: None, antithetic: false }
    }
}

/// Sampled output of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sample_rate: f64,
    pub times: Vec<f64>,
    /// Empty unless states were recorded.
    pub states: Vec<StateVector>,
    pub detector_channels: [Vec<f64>; 3],
    pub envelope: Vec<f64>,
    pub lost: bool,
    pub lost_at: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        &self.detector_channels[k]
    }

    pub fn position(&self, axis: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.position[axis]).collect()
    }

    pub fn momentum(&self, axis: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.momentum[axis]).collect()
    }

    /// Index range of samples with `t0 <= t < t1`.
    pub fn window(&self, t0: f64, t1: f64) -> std::ops::Range<usize> {
        let a = self.times.partition_point(|t| *t < t0 - 1e-15);
        let b = self.times.partition_point(|t| *t < t1 - 1e-15);
        a..b.max(a)
    }

    /// Index of the sample nearest to `t`.
    pub fn index_at(&self, t: f64) -> Option<usize> {
        if self.times.is_empty() {
            return None;
        }
        let i = self.times.partition_point(|x| *x < t);
        if i == 0 {
            Some(0)
        } else if i >= self.times.len() {
            Some(self.times.len() - 1)
        } else if (self.times[i] - t).abs() < (t - self.times[i - 1]).abs() {
            Some(i)
        } else {
            Some(i - 1)
        }
    }
}

/// A schedule bound to a configuration, ready to run many repetitions.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    cfg: &'a SimConfig,
    timeline: Timeline,
    integ: Integrator,
    n_sub: usize,
    h: f64,
    n_samples: usize,
    transduction: Matrix3<f64>,
    const_force: Vector3<f64>,
    has_ramps: bool,
    has_dc_events: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a SimConfig, schedule: &PulseSchedule) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let h = 1.0 / cfg.detectors.sample_rate;
        let n_sub = ((h / cfg.integration.dt) - 1e-9).ceil().max(1.0) as usize;
        let dt = h / n_sub as f64;
        let n_samples = (schedule.total_duration / h + 1e-9).floor() as usize + 1;
        let timeline = schedule.timeline(cfg.dc());
        let has_ramps = schedule
            .events
            .iter()
            .any(|e| matches!(e.action, super::Action::TrapOff | super::Action::TrapOn));
        let has_dc_events = schedule
            .events
            .iter()
            .any(|e| matches!(e.action, super::Action::SetDcVoltages(_)));
        Ok(Self {
            cfg,
            timeline,
            integ: Integrator::new(cfg, dt),
            n_sub,
            h,
            n_samples,
            transduction: cfg.electrodes.transduction,
            const_force: cfg.environment.constant_force(&cfg.particle),
            has_ramps,
            has_dc_events,
        })
    }

    pub fn dt(&self) -> f64 {
        self.integ.dt
    }

    pub fn sample_interval(&self) -> f64 {
        self.h
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Static equilibrium position at `t = 0` in the harmonic approximation.
    /// Thermal initial states are drawn about this point.
    pub fn equilibrium(&self) -> Vector3<f64> {
        let env = if self.has_ramps { self.timeline.envelope_at(0.0) } else { 1.0 };
        if env <= 0.0 {
            return Vector3::zeros();
        }
        let f = self.transduction * self.cfg.dc() + self.const_force;
        Vector3::from_fn(|i, _| f[i] / (self.cfg.trap.stiffness[i] * env))
    }

    /// Runs one repetition, drawing all randomness from `rng`.
    pub fn run<R: Rng + ?Sized>(&self, rng: &mut R, opts: &RunOptions) -> Result<Trajectory> {
        let cfg = self.cfg;
        let sign = if opts.antithetic { -1.0 } else { 1.0 };
        let mut s = match opts.initial {
            Some(s) => s,
            None => {
                let s = sample_thermal_state(cfg.initial_nbar, &cfg.trap, &cfg.particle, rng)?;
                StateVector::new(s.position * sign + self.equilibrium(), s.momentum * sign)
            }
        };
        let mut controller = FeedbackController::new(&cfg.feedback, &cfg.detectors, &cfg.electrodes, cfg.particle.mass);
        let fb_active = controller.any_active();
        let mut supply = cfg.supply_noise.as_ref().map(|n| (n, SupplyNoiseState::new(n, self.h, sign, rng)));
        let chans = cfg.detectors.channels;
        let noise_sd = chans.map(|c| c.noise_std(cfg.detectors.sample_rate));
        let loss_r2 = cfg.loss_radius().powi(2);
        let first = ((opts.record_start / self.h) - 1e-9).ceil().max(0.0) as usize;
        let n_rec = self.n_samples.saturating_sub(first);

        let mut out = Trajectory {
            sample_rate: cfg.detectors.sample_rate,
            times: Vec::with_capacity(n_rec),
            states: Vec::with_capacity(if opts.record_states { n_rec } else { 0 }),
            detector_channels: [Vec::with_capacity(n_rec), Vec::with_capacity(n_rec), Vec::with_capacity(n_rec)],
            envelope: Vec::with_capacity(n_rec),
            lost: false,
            lost_at: None,
        };
        let varying = self.has_dc_events || opts.drive.is_some();
        let dt = self.integ.dt;
        let dc0 = cfg.dc();
        for k in 0..self.n_samples {
            let t = k as f64 * self.h;
            let mut readings = [0.0; 3];
            for c in 0..3 {
                readings[c] = chans[c].noiseless_signal(&s.position);
                if noise_sd[c] > 0.0 {
                    readings[c] += sign * noise_sd[c] * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if k >= first {
                out.times.push(t);
                if opts.record_states {
                    out.states.push(s);
                }
                for c in 0..3 {
                    out.detector_channels[c].push(readings[c]);
                }
                out.envelope.push(if self.has_ramps { self.timeline.envelope_at(t) } else { 1.0 });
            }
            if s.position.norm_squared() > loss_r2 {
                out.lost = true;
                out.lost_at = Some(t);
                break;
            }
            if k + 1 == self.n_samples {
                break;
            }
            let mut held = if fb_active {
                controller.update(&readings, self.h, self.timeline.feedback_at(t))
            } else {
                Vector3::zeros()
            };
            let dc_now = if self.has_dc_events { self.timeline.dc_at(t) } else { dc0 };
            if let Some((n, st)) = supply.as_mut() {
                held += st.apply(n, &dc_now, rng) - dc_now;
            }
            let ext_at = |tt: f64| -> Vector3<f64> {
                let mut v = if self.has_dc_events { self.timeline.dc_at(tt) } else { dc0 } + held;
                if let Some(d) = &opts.drive {
                    v += d.at(tt);
                }
                self.transduction * v + self.const_force
            };
            let env_at = |tt: f64| if self.has_ramps { self.timeline.envelope_at(tt) } else { 1.0 };
            let mut ext0 = ext_at(t);
            let mut env0 = env_at(t);
            for j in 0..self.n_sub {
                let t1 = t + (j + 1) as f64 * dt;
                let ext1 = if varying { ext_at(t1) } else { ext0 };
                let env1 = env_at(t1);
                self.integ.advance_signed(&mut s, env0, env1, &ext0, &ext1, sign, rng);
                ext0 = ext1;
                env0 = env1;
            }
            if !s.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite state after t = {:.9e} s (dt = {dt:e} s)",
                    t + self.h
                )));
            }
        }
        Ok(out)
    }
}

/// Runs a schedule once with the thermal initial state of the configuration.
pub fn simulate(schedule: &PulseSchedule, cfg: &SimConfig, seed: u64) -> Result<Trajectory> {
    let mut rng: SimRng = stream(seed, "simulate", 0);
    Simulator::new(cfg, schedule)?.run(&mut rng, &RunOptions::default())
}
