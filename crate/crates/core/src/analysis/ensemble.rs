use serde::{Deserialize, Serialize};

use super::SineFit;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    /// `m Omega^2 <a^2> / 2` (J).
    pub mean_energy: f64,
    /// Standard error of `mean_energy` over repetitions (J).
    pub mean_energy_error: f64,
    pub times: Vec<f64>,
    /// Across-ensemble variance of the reconstructed oscillations (m^2).
    pub variance_trace: Vec<f64>,
    /// Maximum of `variance_trace`.
    pub max_variance: f64,
    /// `sqrt(max_variance)`.
    pub max_std: f64,
    /// Standard error of `max_std` from sub-ensembles.
    pub max_std_error: f64,
    pub bin_max_std: Vec<f64>,
}

fn variance_trace(fits: &[&SineFit], times: &[f64]) -> Vec<f64> {
    let n = fits.len() as f64;
    times
        .iter()
        .map(|t| {
            let xs: Vec<f64> = fits.iter().map(|f| f.oscillation(*t)).collect();
            let m = xs.iter().sum::<f64>() / n;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .collect()
}

/// Ensemble statistics of sine fits to calibrated position traces, all
/// referred to a common time origin.
///
/// The variance trace is evaluated over one oscillation period; its maximum
/// is the largest extent of the state. The error of `max_std` is the
/// standard error over `n_bins` equal sub-ensembles.
pub fn ensemble_stats(fits: &[SineFit], omega: f64, mass: f64, n_bins: usize) -> Result<EnsembleStats> {
    if n_bins < 2 || fits.len() < n_bins || fits.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} trajectories for {n_bins} bins",
            fits.len()
        )));
    }
    let n_t = 256;
    let period = 2.0 * std::f64::consts::PI / omega;
    let times: Vec<f64> = (0..n_t).map(|k| period * k as f64 / n_t as f64).collect();
    let all: Vec<&SineFit> = fits.iter().collect();
    let vt = variance_trace(&all, &times);
    let max_var = vt.iter().cloned().fold(0.0, f64::max);

    let per = fits.len() / n_bins;
    let bin_max_std: Vec<f64> = (0..n_bins)
        .map(|b| {
            let chunk: Vec<&SineFit> = fits[b * per..(b + 1) * per].iter().collect();
            if chunk.len() < 2 {
                return 0.0;
            }
            variance_trace(&chunk, &times).into_iter().fold(0.0, f64::max).sqrt()
        })
        .collect();
    let mb = bin_max_std.iter().sum::<f64>() / n_bins as f64;
    let sd = (bin_max_std.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (n_bins as f64 - 1.0)).sqrt();

    let a2: Vec<f64> = fits.iter().map(|f| f.amplitude * f.amplitude).collect();
    let ma2 = a2.iter().sum::<f64>() / a2.len() as f64;
    let sa2 = (a2.iter().map(|v| (v - ma2).powi(2)).sum::<f64>() / (a2.len() as f64 - 1.0)).sqrt();
    let k = 0.5 * mass * omega * omega;
    Ok(EnsembleStats {
        mean_energy: k * ma2,
        mean_energy_error: k * sa2 / (a2.len() as f64).sqrt(),
        times,
        variance_trace: vt,
        max_variance: max_var,
        max_std: max_var.sqrt(),
        max_std_error: sd / (n_bins as f64).sqrt(),
        bin_max_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::recapture_variance_max;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fit(a_s: f64, a_c: f64, w: f64) -> SineFit {
        SineFit {
            amplitude: a_s.hypot(a_c),
            phase: a_c.atan2(a_s),
            slope: 0.0,
            offset: 0.0,
            omega: w,
            residual_rms: 0.0,
            converged: true,
        }
    }

    #[test]
    fn identical_trajectories() {
        let f = vec![fit(1e-9, 2e-9, 1e6); 20];
        let s = ensemble_stats(&f, 1e6, 1e-18, 10).unwrap();
        assert!(s.max_std < 1e-12 * 2.3e-9);
        assert_eq!(s.max_variance, s.variance_trace.iter().cloned().fold(0.0, f64::max));
        assert_eq!(s.max_std, s.max_variance.sqrt());
    }

    #[test]
    fn matches_recapture_maximum() {
        // Post-recapture x(t) = x1 cos(wt) + p1/(m w) sin(wt) with (x1, p1)
        // drawn after a free flight of tau from a thermal state.
        let (m, w, tau) = (3.975e-18, 2.0 * std::f64::consts::PI * 92e3, 50e-6);
        let sz = 5.4e-21f64;
        let sp = (m * w).powi(2) * sz;
        let mut rng = crate::rng::stream(4, "ens", 0);
        let fits: Vec<SineFit> = (0..1500)
            .map(|_| {
                let x0 = sz.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let p0 = sp.sqrt() * rng.sample::<f64, _>(StandardNormal);
                let x1 = x0 + p0 * tau / m;
                fit(p0 / (m * w), x1, w)
            })
            .collect();
        let s = ensemble_stats(&fits, w, m, 10).unwrap();
        let want = recapture_variance_max(sz, sp, tau, w, m).unwrap().sqrt();
        assert!((s.max_std - want).abs() < 3.0 * s.max_std_error, "{} {} {}", s.max_std, want, s.max_std_error);
        assert!(s.max_std_error > 0.0);
    }
}
