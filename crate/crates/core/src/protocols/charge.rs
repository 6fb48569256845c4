use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::calibrated;
use crate::analysis::demodulate;
use crate::consts::E_CHARGE;
use crate::dynamics::{Drive, PulseSchedule, RunOptions, Simulator};
use crate::model::Axis;
use crate::rng::{derive_seed, stream};
use crate::{Error, Result, SimConfig};

/// Drive-on time before demodulation starts (s).
pub const CHARGE_SETTLE: f64 = 200e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeMeasurement {
    pub charge_q: i64,
    pub drive_amplitude: f64,
    pub drive_frequency: f64,
    /// Demodulated axial amplitude (m) and phase relative to the drive.
    pub amplitude: f64,
    pub phase: f64,
    /// Amplitude projected on the response phase of one positive charge (m).
    pub signed_amplitude: f64,
    /// RMS lock-in amplitude at neighbouring frequencies (m).
    pub noise_floor: f64,
    /// `|chi(omega_d)|` (m/N).
    pub susceptibility: f64,
    /// Amplitude per elementary charge, `e |G_zz| V_d |chi|` (m).
    pub single_e_response: f64,
    /// `signed_amplitude / single_e_response`.
    pub inferred_charge: f64,
    pub expected_amplitude: f64,
}

/// Damped-oscillator susceptibility `1 / (m (Omega^2 - w^2 + i Gamma w))`.
fn susceptibility(cfg: &SimConfig, omega_d: f64) -> Complex<f64> {
    let z = Axis::Z.index();
    let fb = cfg.feedback.axes[z];
    let gamma = cfg.environment.gamma + if fb.enabled { fb.gain } else { 0.0 };
    let w0 = cfg.trap.omega[z];
    1.0 / (cfg.particle.mass * Complex::new(w0 * w0 - omega_d * omega_d, gamma * omega_d))
}

/// Drives the z electrode with `V_d sin(2 pi f t)` and demodulates the
/// calibrated axial signal at `f` for `duration` after a short settle.
pub fn charge_measure(
    drive_amplitude: f64,
    drive_frequency: f64,
    duration: f64,
    cfg: &SimConfig,
    seed: u64,
) -> Result<ChargeMeasurement> {
    if !(drive_amplitude > 0.0) || !(drive_frequency > 0.0) {
        return Err(Error::domain("drive amplitude and frequency must be > 0"));
    }
    let wd = 2.0 * PI * drive_frequency;
    for (i, w) in cfg.trap.omega.iter().enumerate() {
        if (wd - w).abs() < 0.02 * w {
            return Err(Error::domain(format!(
                "drive at {drive_frequency} Hz is within 2% of mode {i} ({:.0} Hz)",
                w / (2.0 * PI)
            )));
        }
    }
    if !(duration * drive_frequency >= 20.0) {
        return Err(Error::domain("duration must cover at least 20 drive periods"));
    }
    let z = Axis::Z.index();
    let sched = PulseSchedule::steady(CHARGE_SETTLE + duration);
    let sim = Simulator::new(cfg, &sched)?;
    let opts = RunOptions {
        record_states: false,
        record_start: CHARGE_SETTLE,
        drive: Some(Drive { amplitude: [0.0, 0.0, drive_amplitude], frequency: drive_frequency, phase: 0.0 }),
        ..Default::default()
    };
    let tr = sim.run(&mut stream(seed, "charge", 0), &opts)?;
    if tr.lost {
        return Err(Error::ParticleLost(format!("at {:e} s during the drive", tr.lost_at.unwrap_or(0.0))));
    }
    let x = calibrated(&tr, cfg, z);
    let fs = tr.sample_rate;
    let t0 = tr.times[0];
    let d = demodulate(&x, fs, t0, drive_frequency)?;

    let span = x.len() as f64 / fs;
    let mut p2 = 0.0;
    let offsets = [-6.0, -5.0, -4.0, -3.0, 3.0, 4.0, 5.0, 6.0];
    for j in offsets {
        p2 += demodulate(&x, fs, t0, drive_frequency + j / span)?.amplitude.powi(2);
    }
    let noise_floor = (p2 / offsets.len() as f64).sqrt();

    let chi = susceptibility(cfg, wd);
    let g_zz = cfg.electrodes.geometry[(z, z)];
    let single = E_CHARGE * g_zz.abs() * drive_amplitude * chi.norm();
    // Response phase of a positive unit charge.
    let ref_phase = chi.arg() + if g_zz < 0.0 { PI } else { 0.0 };
    let signed = d.amplitude * (d.phase - ref_phase).cos();
    Ok(ChargeMeasurement {
        charge_q: cfg.particle.charge_q,
        drive_amplitude,
        drive_frequency,
        amplitude: d.amplitude,
        phase: d.phase,
        signed_amplitude: signed,
        noise_floor,
        susceptibility: chi.norm(),
        single_e_response: single,
        inferred_charge: signed / single,
        expected_amplitude: cfg.particle.charge_q.unsigned_abs() as f64 * single,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub center: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeStepResult {
    pub measurements: Vec<ChargeMeasurement>,
    /// Differences of consecutive signed amplitudes (m).
    pub steps: Vec<f64>,
    /// Steps above this size count as charge jumps (m).
    pub threshold: f64,
    /// Amplitude of one elementary charge estimated from the steps (m).
    pub unit_step: f64,
    /// Integer charge count assigned to each jump.
    pub step_charges: Vec<i64>,
    /// Model value of the single-charge response (m).
    pub single_e_response: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Measures each charge state in turn and calibrates the single-charge
/// response from the jumps between them.
///
/// The smallest jump seeds the unit; the unit is then refitted through the
/// origin against the integer multiples assigned to every jump.
pub fn charge_step_sequence(
    charges: &[i64],
    drive_amplitude: f64,
    drive_frequency: f64,
    duration: f64,
    cfg: &SimConfig,
    seed: u64,
) -> Result<ChargeStepResult> {
    if charges.len() < 2 {
        return Err(Error::domain("need at least two charge states"));
    }
    let measurements = charges
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let c = cfg.with_charge(*q);
            charge_measure(drive_amplitude, drive_frequency, duration, &c, derive_seed(seed, &format!("charge/{k}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let steps: Vec<f64> = measurements.windows(2).map(|w| w[1].signed_amplitude - w[0].signed_amplitude).collect();
    let noise = measurements.iter().map(|m| m.noise_floor).fold(0.0, f64::max);
    let threshold = 3.0 * 2f64.sqrt() * noise;
    let jumps: Vec<f64> = steps.iter().map(|s| s.abs()).filter(|s| *s > threshold).collect();
    let u0 = jumps
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !u0.is_finite() {
        return Err(Error::InsufficientData("no charge jump above the noise floor".into()));
    }
    let mut u = u0;
    for _ in 0..3 {
        let n: Vec<f64> = jumps.iter().map(|j| (j / u).round().max(1.0)).collect();
        u = jumps.iter().zip(&n).map(|(j, n)| j * n).sum::<f64>() / n.iter().map(|n| n * n).sum::<f64>();
    }
    let step_charges = steps
        .iter()
        .map(|s| if s.abs() > threshold { (s / u).round() as i64 } else { 0 })
        .collect();

    let width = u / 5.0;
    let top = jumps.iter().cloned().fold(0.0, f64::max);
    let n_bins = (top / width).floor() as usize + 1;
    let mut histogram: Vec<HistogramBin> =
        (0..n_bins).map(|b| HistogramBin { center: (b as f64 + 0.5) * width, count: 0 }).collect();
    for j in &jumps {
        histogram[((j / width).floor() as usize).min(n_bins - 1)].count += 1;
    }
    Ok(ChargeStepResult {
        single_e_response: measurements[0].single_e_response,
        measurements,
        steps,
        threshold,
        unit_step: u,
        step_charges,
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_particle_gives_noise_floor() {
        let c = SimConfig::reference().with_charge(0);
        let m = charge_measure(5.0, 120e3, 1e-3, &c, 3).unwrap();
        assert!(m.amplitude < 4.0 * m.noise_floor, "{} {}", m.amplitude, m.noise_floor);
        let charged = charge_measure(5.0, 120e3, 1e-3, &SimConfig::reference().with_charge(1), 3).unwrap();
        assert!(charged.amplitude > 10.0 * m.noise_floor);
    }

    #[test]
    fn amplitude_is_linear_in_charge() {
        let c = SimConfig::reference();
        let a = charge_measure(2.0, 120e3, 1e-3, &c.with_charge(20), 5).unwrap();
        let b = charge_measure(2.0, 120e3, 1e-3, &c.with_charge(40), 5).unwrap();
        assert!((b.amplitude / a.amplitude / 2.0 - 1.0).abs() < 0.02);
        assert!((a.inferred_charge / 20.0 - 1.0).abs() < 0.02, "{}", a.inferred_charge);
        assert!((a.amplitude / a.expected_amplitude - 1.0).abs() < 0.02);
    }

    #[test]
    fn step_histogram_spacing() {
        let c = SimConfig::reference();
        let r = charge_step_sequence(&[12, 11, 13, 10, 10, 15, 14, 16], 5.0, 120e3, 1e-3, &c, 8).unwrap();
        assert!((r.unit_step / r.single_e_response - 1.0).abs() < 0.05, "{} {}", r.unit_step, r.single_e_response);
        assert_eq!(r.step_charges, vec![-1, 2, -3, 0, 5, -1, 2]);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 6);
    }

    #[test]
    fn resonant_drive_is_rejected() {
        assert!(charge_measure(1.0, 92.5e3, 1e-3, &SimConfig::reference(), 1).is_err());
    }
}
