use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{calibrated, check_reps, RepRunner, Sampling};
use crate::analysis::{fit_line, moving_variance};
use crate::consts::KB;
use crate::dynamics::{AxisFeedback, PulseSchedule};
use crate::model::Axis;
use crate::{Error, Result, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReheatOptions {
    pub repetitions: usize,
    pub sampling: Sampling,
    /// Moving-variance window (s).
    pub window: f64,
    pub dt: f64,
    pub sample_rate: f64,
    /// Spacing of the reported energy curve (s).
    pub output_interval: f64,
}

impl Default for ReheatOptions {
    fn default() -> Self {
        Self {
            repetitions: 100,
            sampling: Sampling::Independent,
            window: 40e-6,
            dt: 25e-9,
            sample_rate: 4e6,
            output_interval: 10e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReheatSeries {
    pub bias: Vector3<f64>,
    pub times: Vec<f64>,
    /// Axial energy from the moving variance, averaged over repetitions (J).
    pub mean_energy: Vec<f64>,
    /// Mean and standard error of the per-repetition heating rates (J/s).
    pub rate: f64,
    pub rate_se: f64,
    /// Paired difference to the first bias, repetition by repetition.
    pub excess_rate: f64,
    pub excess_rate_se: f64,
    pub lost: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReheatResult {
    pub duration: f64,
    pub series: Vec<ReheatSeries>,
    /// `gamma kB T` of the residual gas (J/s).
    pub gas_rate: f64,
    /// Total diffusion-limited rate including recoil, `D_z / 2m` (J/s).
    pub diffusion_rate: f64,
}

/// Axial heating with the z feedback off, for each DC bias.
///
/// All biases share the same random streams, so differences between them
/// come from the bias alone.
pub fn reheating_experiment(
    biases: &[Vector3<f64>],
    duration: f64,
    cfg: &SimConfig,
    seed: u64,
    o: &ReheatOptions,
) -> Result<ReheatResult> {
    check_reps(o.repetitions, o.sampling)?;
    if biases.is_empty() {
        return Err(Error::domain("no bias voltages given"));
    }
    if !(duration > 4.0 * o.window) || !(o.output_interval > 0.0) {
        return Err(Error::domain("duration must exceed four variance windows"));
    }
    let z = Axis::Z.index();
    let mut base = cfg.clone();
    base.integration.dt = o.dt;
    base.detectors.sample_rate = o.sample_rate;
    base.feedback.axes[z] = AxisFeedback::disabled(Axis::Z);
    base.validate()?;
    let k = base.particle.mass * base.trap.omega[z].powi(2);
    let sched = PulseSchedule::steady(duration);
    let fs = o.sample_rate;
    let half = (0.5 * o.window * fs).ceil() as usize;
    let stride = ((o.output_interval * fs).round() as usize).max(1);

    let mut series = Vec::with_capacity(biases.len());
    let mut first_rates: Option<Vec<Option<f64>>> = None;
    for bias in biases {
        let mut c = base.clone();
        c.dc_voltages = (*bias).into();
        let runner = RepRunner::new(&c, &sched, seed, "reheat", o.sampling, o.repetitions)?;
        let per: Vec<Option<(Vec<f64>, f64)>> = runner.run_all(o.repetitions, |_, tr| {
            if tr.lost {
                return Ok(None);
            }
            let x = calibrated(&tr, &c, z);
            let mv = moving_variance(&x, fs, o.window)?;
            // Skip the edges where the centred window is truncated.
            let idx: Vec<usize> = (half..mv.len().saturating_sub(half)).step_by(stride).collect();
            let t: Vec<f64> = idx.iter().map(|&i| tr.times[i]).collect();
            let e: Vec<f64> = idx.iter().map(|&i| k * mv[i]).collect();
            let rate = fit_line(&t, &e, None)?.slope;
            Ok(Some((e, rate)))
        })?;
        let n_out = per.iter().flatten().map(|p| p.0.len()).next().unwrap_or(0);
        let times: Vec<f64> = (0..n_out).map(|j| (half + j * stride) as f64 / fs).collect();
        let ok: Vec<&(Vec<f64>, f64)> = per.iter().flatten().collect();
        if ok.is_empty() {
            return Err(Error::ParticleLost(format!("in all repetitions at bias {:?} V", bias.as_slice())));
        }
        if ok.len() < 2 {
            return Err(Error::InsufficientData("fewer than 2 repetitions kept the particle".into()));
        }
        let mut mean_energy = vec![0.0; n_out];
        for (e, _) in &ok {
            for (m, v) in mean_energy.iter_mut().zip(e) {
                *m += v / ok.len() as f64;
            }
        }
        let rates: Vec<f64> = ok.iter().map(|p| p.1).collect();
        let (rate, rate_se) = mean_se(&rates);
        let these: Vec<Option<f64>> = per.iter().map(|p| p.as_ref().map(|p| p.1)).collect();
        let first = first_rates.get_or_insert_with(|| these.clone());
        let diffs: Vec<f64> = first
            .iter()
            .zip(&these)
            .filter_map(|(a, b)| Some(b.as_ref()? - a.as_ref()?))
            .collect();
        let (excess_rate, excess_rate_se) = if diffs.len() >= 2 { mean_se(&diffs) } else { (f64::NAN, f64::NAN) };
        series.push(ReheatSeries {
            bias: *bias,
            times,
            mean_energy,
            rate,
            rate_se,
            excess_rate,
            excess_rate_se,
            lost: o.repetitions - ok.len(),
        });
    }
    let env = &base.environment;
    Ok(ReheatResult {
        duration,
        series,
        gas_rate: env.gamma * KB * env.gas_temperature,
        diffusion_rate: env.diffusion(base.particle.mass, 1.0)[z] / (2.0 * base.particle.mass),
    })
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::epstein_damping;

    #[test]
    fn noiseless_particle_stays_cold() {
        let mut c = SimConfig::reference();
        c.environment = crate::Environment::vacuum();
        c.detectors.channels.iter_mut().for_each(|ch| ch.noise_psd = 0.0);
        let o = ReheatOptions { repetitions: 4, ..Default::default() };
        let r = reheating_experiment(&[Vector3::zeros()], 1e-3, &c, 1, &o).unwrap();
        let s = &r.series[0];
        let e0 = s.mean_energy[0];
        assert!(s.mean_energy.iter().all(|e| (e / e0 - 1.0).abs() < 0.05));
        assert!(s.rate.abs() * 1e-3 < 0.01 * e0);
    }

    #[test]
    fn gas_heating_rate() {
        let mut c = SimConfig::reference();
        let p = 1e-3;
        c.environment.pressure_mbar = Some(p);
        c.environment.gamma = epstein_damping(p, 300.0, c.particle.diameter, c.particle.density).unwrap();
        c.environment.recoil_dp = [0.0; 3];
        let o = ReheatOptions { repetitions: 120, ..Default::default() };
        let r = reheating_experiment(&[Vector3::zeros()], 1e-3, &c, 3, &o).unwrap();
        let s = &r.series[0];
        assert!((s.rate - r.gas_rate).abs() < 4.0 * s.rate_se, "{} +- {} vs {}", s.rate, s.rate_se, r.gas_rate);
        assert_eq!(s.excess_rate, 0.0);
    }
}
