use std::f64::consts::PI;

use nalgebra::{Matrix4, Matrix5, Vector4, Vector5};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `a sin(omega t + phase) + slope t + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineFit {
    pub amplitude: f64,
    /// In `(-pi, pi]`, referred to `t = 0`.
    pub phase: f64,
    pub slope: f64,
    pub offset: f64,
    pub omega: f64,
    pub residual_rms: f64,
    /// False when the frequency search ended on the edge of its interval.
    pub converged: bool,
}

impl SineFit {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin() + self.slope * t + self.offset
    }

    /// Oscillating part only.
    pub fn oscillation(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).sin()
    }
}

fn wrap(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    p
}

struct Linear {
    coef: Vector4<f64>,
    rss: f64,
}

/// Least squares in `(sin, cos, u, 1)` for fixed omega via scaled normal
/// equations (the basis is well conditioned on a centred time axis).
fn solve_linear(u: &[f64], y: &[f64], omega: f64) -> Option<Linear> {
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut ata = Matrix4::zeros();
    let mut aty = Vector4::zeros();
    for (&ui, &yi) in u.iter().zip(y) {
        let (s, c) = (omega * ui).sin_cos();
        let row = Vector4::new(s, c, ui / umax, 1.0);
        ata += row * row.transpose();
        aty += row * yi;
    }
    let chol = ata.cholesky()?;
    let mut coef = chol.solve(&aty);
    let mut rss = 0.0;
    for (&ui, &yi) in u.iter().zip(y) {
        let (s, c) = (omega * ui).sin_cos();
        let m = coef[0] * s + coef[1] * c + coef[2] * ui / umax + coef[3];
        rss += (yi - m).powi(2);
    }
    coef[2] /= umax;
    Some(Linear { coef, rss })
}

fn finish(u_shift: f64, omega: f64, lin: &Linear, n: usize, converged: bool) -> SineFit {
    let (a_s, a_c) = (lin.coef[0], lin.coef[1]);
    let amplitude = a_s.hypot(a_c);
    // a sin(w (t - tm) + phi') = a sin(w t + phi' - w tm)
    let phase = if amplitude > 0.0 { wrap(a_c.atan2(a_s) - omega * u_shift) } else { 0.0 };
    SineFit {
        amplitude,
        phase,
        slope: lin.coef[2],
        offset: lin.coef[3] - lin.coef[2] * u_shift,
        omega,
        residual_rms: (lin.rss / n as f64).sqrt(),
        converged,
    }
}

fn prepare(times: &[f64], values: &[f64]) -> Result<(f64, Vec<f64>)> {
    if times.len() != values.len() {
        return Err(Error::domain("times and values differ in length"));
    }
    if times.len() < 5 {
        return Err(Error::InsufficientData("sine fit needs at least 5 samples".into()));
    }
    let tm = times.iter().sum::<f64>() / times.len() as f64;
    Ok((tm, times.iter().map(|t| t - tm).collect()))
}

/// Sine fit at a known frequency.
pub fn fit_sine_fixed(times: &[f64], values: &[f64], omega: f64) -> Result<SineFit> {
    let (tm, u) = prepare(times, values)?;
    let lin = solve_linear(&u, values, omega).ok_or_else(|| Error::Singular("sine design".into()))?;
    Ok(finish(tm, omega, &lin, u.len(), true))
}

/// Least-squares fit of `a sin(omega t + phase) + b t + c` with `omega`
/// refined within 2% of `omega_guess`.
///
/// For fixed omega the problem is linear; omega is located by a grid and
/// golden-section search on the residual and then polished by Gauss-Newton
/// on all five parameters.
pub fn fit_sine(times: &[f64], values: &[f64], omega_guess: f64) -> Result<SineFit> {
    let (tm, u) = prepare(times, values)?;
    if !(omega_guess > 0.0) {
        return Err(Error::domain("omega guess must be > 0"));
    }
    let span = u.last().unwrap() - u.first().unwrap();
    if span.abs() * omega_guess < 2.0 * 2.0 * PI * 0.98 {
        return Err(Error::InsufficientData("sine fit needs at least two periods".into()));
    }
    let lo = 0.98 * omega_guess;
    let hi = 1.02 * omega_guess;
    let rss = |w: f64| solve_linear(&u, values, w).map_or(f64::INFINITY, |l| l.rss);

    let n_grid = 40;
    let grid: Vec<f64> = (0..=n_grid).map(|k| lo + (hi - lo) * k as f64 / n_grid as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|w| rss(*w)).collect();
    let best = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n_grid)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (rss(c), rss(d));
    for _ in 0..80 {
        if (b - a) < 1e-13 * omega_guess {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = rss(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = rss(d);
        }
    }
    let mut omega = 0.5 * (a + b);
    let mut lin = solve_linear(&u, values, omega).ok_or_else(|| Error::Singular("sine design".into()))?;

    // Gauss-Newton on (A, B, b, c, omega).
    let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for _ in 0..8 {
        let p = Vector5::new(lin.coef[0], lin.coef[1], lin.coef[2] * umax, lin.coef[3], 0.0);
        let mut jtj = Matrix5::zeros();
        let mut jtr = Vector5::zeros();
        for (&ui, &yi) in u.iter().zip(values) {
            let (s, cs) = (omega * ui).sin_cos();
            let model = p[0] * s + p[1] * cs + p[2] * ui / umax + p[3];
            let dw = ui * (p[0] * cs - p[1] * s) / umax;
            let row = Vector5::new(s, cs, ui / umax, 1.0, dw);
            jtj += row * row.transpose();
            jtr += row * (yi - model);
        }
        let Some(ch) = jtj.cholesky() else { break };
        let step = ch.solve(&jtr);
        let w_new = (omega + step[4] / umax).clamp(lo, hi);
        let cand = match solve_linear(&u, values, w_new) {
            Some(l) => l,
            None => break,
        };
        if !(cand.rss <= lin.rss) {
            break;
        }
        let done = (w_new - omega).abs() <= 1e-15 * omega;
        omega = w_new;
        lin = cand;
        if done {
            break;
        }
    }
    let edge = 1e-6 * omega_guess;
    let converged = omega - lo > edge && hi - omega > edge;
    Ok(finish(tm, omega, &lin, u.len(), converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn grid(n: usize, fs: f64, t0: f64) -> Vec<f64> {
        (0..n).map(|k| t0 + k as f64 / fs).collect()
    }

    #[test]
    fn noiseless_recovery() {
        let w = 2.0 * PI * 92e3;
        let t = grid(500, 20e6, 3e-6);
        let truth = SineFit {
            amplitude: 2.5e-3,
            phase: -1.1,
            slope: 3.0,
            offset: 1e-4,
            omega: w * 1.013,
            residual_rms: 0.0,
            converged: true,
        };
        let y: Vec<f64> = t.iter().map(|t| truth.eval(*t)).collect();
        let f = fit_sine(&t, &y, w).unwrap();
        assert!(f.converged);
        assert!((f.amplitude / truth.amplitude - 1.0).abs() < 1e-9);
        assert!((f.omega / truth.omega - 1.0).abs() < 1e-9);
        assert!((f.phase - truth.phase).abs() < 1e-9);
        assert!((f.slope / truth.slope - 1.0).abs() < 1e-6);
        assert!((f.offset - truth.offset).abs() < 1e-9 * truth.offset.abs().max(1e-6));
    }

    #[test]
    fn amplitude_within_two_percent_at_snr_ten() {
        let w = 2.0 * PI * 92e3;
        let t = grid(500, 20e6, 0.0);
        let mut rng = crate::rng::stream(2, "t", 0);
        let a = 1.0;
        let y: Vec<f64> = t
            .iter()
            .map(|t| a * (w * t + 0.4).sin() + 2e3 * t + 0.1 + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let f = fit_sine(&t, &y, w * 0.99).unwrap();
        assert!((f.amplitude - a).abs() < 0.02, "{}", f.amplitude);
    }

    #[test]
    fn null_signal_stays_at_noise_floor() {
        let w = 2.0 * PI * 92e3;
        let t = grid(500, 20e6, 0.0);
        let mut rng = crate::rng::stream(3, "t", 0);
        let y: Vec<f64> = t.iter().map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let f = fit_sine(&t, &y, w).unwrap();
        // Noise projected onto two quadratures of 500 samples.
        assert!(f.amplitude < 0.1 * 4.0 * (2.0f64 / 500.0).sqrt(), "{}", f.amplitude);
    }

    #[test]
    fn too_short() {
        let t = grid(100, 20e6, 0.0);
        let y = vec![0.0; 100];
        assert!(fit_sine(&t, &y, 2.0 * PI * 92e3).is_err());
    }

    #[test]
    fn time_shift_invariance() {
        let w = 2.0 * PI * 268e3;
        let mut rng = crate::rng::stream(4, "t", 0);
        let t = grid(400, 20e6, 0.0);
        let y: Vec<f64> = t
            .iter()
            .map(|t| (w * t).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let a = fit_sine(&t, &y, w).unwrap();
        let ts: Vec<f64> = t.iter().map(|t| t + 1.234e-3).collect();
        let b = fit_sine(&ts, &y, w).unwrap();
        assert!((a.amplitude / b.amplitude - 1.0).abs() < 1e-9);
    }
}
