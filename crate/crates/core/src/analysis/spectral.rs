use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::variance::population_variance;
use crate::consts::KB;
use crate::{Error, Result};

/// One-sided power spectral density (units^2/Hz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub frequencies: Vec<f64>,
    pub density: Vec<f64>,
    /// Bin spacing (Hz).
    pub resolution: f64,
}

impl Psd {
    /// Sum over all bins, which equals the variance of the input.
    pub fn total_power(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.resolution
    }
}

/// Welch estimate with a Hann window, per-segment mean removal and
/// fractional `overlap` between segments.
pub fn psd_welch(trace: &[f64], sample_rate: f64, segment_length: usize, overlap: f64) -> Result<Psd> {
    if segment_length < 8 {
        return Err(Error::domain("segment length must be >= 8"));
    }
    if segment_length > trace.len() {
        return Err(Error::InsufficientData(format!(
            "segment of {segment_length} samples exceeds trace of {}",
            trace.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap) || !(sample_rate > 0.0) {
        return Err(Error::domain("overlap must lie in [0, 1) and sample rate be > 0"));
    }
    let n = segment_length;
    let hop = ((n as f64 * (1.0 - overlap)).round() as usize).max(1);
    let window: Vec<f64> = (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let n_bins = n / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut segments = 0usize;
    let mut start = 0;
    while start + n <= trace.len() {
        let seg = &trace[start..start + n];
        let m = seg.iter().sum::<f64>() / n as f64;
        for k in 0..n {
            buf[k] = Complex::new((seg[k] - m) * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let scale = 1.0 / (sample_rate * wss * segments as f64);
    let density = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            a * scale * one_sided
        })
        .collect();
    let resolution = sample_rate / n as f64;
    Ok(Psd { frequencies: (0..n_bins).map(|k| k as f64 * resolution).collect(), density, resolution })
}

/// Trapezoidal integral of the density over `[f_lo, f_hi]`.
pub fn integrate_band(psd: &Psd, f_lo: f64, f_hi: f64) -> Result<f64> {
    let nyq = *psd.frequencies.last().unwrap_or(&0.0);
    if !(f_lo < f_hi) || f_lo < 0.0 || f_hi > nyq + 1e-9 * nyq {
        return Err(Error::domain(format!("band [{f_lo}, {f_hi}] Hz is not within [0, {nyq}] Hz")));
    }
    let idx: Vec<usize> = (0..psd.frequencies.len())
        .filter(|&k| psd.frequencies[k] >= f_lo && psd.frequencies[k] <= f_hi)
        .collect();
    if idx.len() < 2 {
        return Err(Error::InsufficientData("band narrower than two bins".into()));
    }
    Ok(idx
        .windows(2)
        .map(|w| 0.5 * (psd.density[w[0]] + psd.density[w[1]]) * psd.resolution)
        .sum())
}

/// Peak area in `[f_lo, f_hi]` above the median noise floor of the whole
/// spectrum.
pub fn integrate_peak(psd: &Psd, f_lo: f64, f_hi: f64) -> Result<f64> {
    let raw = integrate_band(psd, f_lo, f_hi)?;
    let mut d = psd.density.clone();
    d.sort_by(f64::total_cmp);
    let median = d[d.len() / 2];
    let lo = psd.frequencies.iter().position(|f| *f >= f_lo).unwrap();
    let hi = psd.frequencies.iter().rposition(|f| *f <= f_hi).unwrap();
    let width = psd.frequencies[hi] - psd.frequencies[lo];
    Ok(raw - median * width)
}

/// Detector gain (V/m) from a thermalised trace at known temperature.
pub fn equipartition_calibrate(trace_volts: &[f64], temperature: f64, omega: f64, mass: f64) -> Result<f64> {
    if trace_volts.len() < 2 {
        return Err(Error::InsufficientData("calibration trace too short".into()));
    }
    if !(temperature > 0.0) || !(omega > 0.0) || !(mass > 0.0) {
        return Err(Error::domain("temperature, frequency and mass must be > 0"));
    }
    let x2 = KB * temperature / (mass * omega * omega);
    Ok((population_variance(trace_volts) / x2).sqrt())
}

/// Lock-in output at one frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demodulated {
    pub amplitude: f64,
    /// Phase relative to `sin(2 pi f t)`.
    pub phase: f64,
    pub in_phase: f64,
    pub quadrature: f64,
}

/// Demodulates `trace` (sampled from `t0`) at `frequency` over the largest
/// whole number of periods it contains.
pub fn demodulate(trace: &[f64], sample_rate: f64, t0: f64, frequency: f64) -> Result<Demodulated> {
    let periods = (trace.len() as f64 / sample_rate * frequency).floor();
    if periods < 1.0 {
        return Err(Error::InsufficientData("trace shorter than one drive period".into()));
    }
    let n = ((periods / frequency) * sample_rate).round() as usize;
    let n = n.min(trace.len());
    let w = 2.0 * PI * frequency;
    let m = trace[..n].iter().sum::<f64>() / n as f64;
    let (mut i, mut q) = (0.0, 0.0);
    for (k, x) in trace[..n].iter().enumerate() {
        let (s, c) = (w * (t0 + k as f64 / sample_rate)).sin_cos();
        i += (x - m) * s;
        q += (x - m) * c;
    }
    i *= 2.0 / n as f64;
    q *= 2.0 / n as f64;
    Ok(Demodulated { amplitude: i.hypot(q), phase: q.atan2(i), in_phase: i, quadrature: q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn sine_peak_and_parseval() {
        let fs = 1e6;
        let x: Vec<f64> = (0..1 << 16).map(|k| 0.8 * (2.0 * PI * 12_345.0 * k as f64 / fs).sin()).collect();
        let p = psd_welch(&x, fs, 1 << 12, 0.5).unwrap();
        assert!((p.total_power() / population_variance(&x) - 1.0).abs() < 0.01);
        let peak = integrate_peak(&p, 11e3, 14e3).unwrap();
        assert!((peak / 0.32 - 1.0).abs() < 0.02, "{peak}");
    }

    #[test]
    fn white_noise_is_flat() {
        let fs = 2e6;
        let mut rng = crate::rng::stream(1, "psd", 0);
        let x: Vec<f64> = (0..1 << 18).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let p = psd_welch(&x, fs, 1 << 12, 0.5).unwrap();
        let level = 0.25 / (fs / 2.0);
        let inner = &p.density[10..p.density.len() - 10];
        let avg = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((avg / level - 1.0).abs() < 0.02);
        assert!((p.total_power() / population_variance(&x) - 1.0).abs() < 0.01);
    }

    #[test]
    fn disjoint_bands_add() {
        let fs = 1e6;
        let x: Vec<f64> = (0..1 << 16)
            .map(|k| {
                let t = k as f64 / fs;
                (2.0 * PI * 50e3 * t).sin() + 0.5 * (2.0 * PI * 150e3 * t).sin()
            })
            .collect();
        let p = psd_welch(&x, fs, 1 << 12, 0.5).unwrap();
        let a = integrate_peak(&p, 45e3, 55e3).unwrap();
        let b = integrate_peak(&p, 145e3, 155e3).unwrap();
        assert!((a / 0.5 - 1.0).abs() < 0.02 && (b / 0.125 - 1.0).abs() < 0.02);
        assert!(integrate_band(&p, 10.0, 1e7).is_err());
    }

    #[test]
    fn equipartition_gain() {
        let mut rng = crate::rng::stream(2, "eq", 0);
        let (t, w, m) = (300.0, 2.0 * PI * 92e3, 3.975e-18);
        let sigma = (KB * t / (m * w * w)).sqrt();
        // Direct evaluation of sqrt(kT / m w^2): 55.8 nm.
        assert!((sigma / 55.8e-9 - 1.0).abs() < 0.01, "{sigma}");
        for g in [1.0, 3.7e6] {
            let x: Vec<f64> = (0..1_000_000).map(|_| g * sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let est = equipartition_calibrate(&x, t, w, m).unwrap();
            assert!((est / g - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn lock_in() {
        let fs = 20e6;
        let f = 120e3;
        let x: Vec<f64> = (0..40_000).map(|k| 0.3 * (2.0 * PI * f * k as f64 / fs + 0.2).sin() + 1.0).collect();
        let d = demodulate(&x, fs, 0.0, f).unwrap();
        assert!((d.amplitude / 0.3 - 1.0).abs() < 1e-3);
        assert!((d.phase - 0.2).abs() < 1e-3);
    }
}
