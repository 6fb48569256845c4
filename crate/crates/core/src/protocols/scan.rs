use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::release::ReleaseTiming;
use super::{calibrated, check_reps, RepRunner, Sampling};
use crate::analysis::{fit_line, fit_parabola, fit_tau_scaling, t95, windowed_variance, LineFit, ParabolaFit, TauScalingFit};
use crate::model::Axis;
use crate::rng::derive_seed;
use crate::{Error, Result, SimConfig};

/// How a scan voltage is distributed over the electrodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossTalkMode {
    /// Column `axis` of the normalised inverse, which moves only that axis.
    #[default]
    Corrected,
    /// The electrode of the scanned axis alone.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSpec {
    pub axis: Axis,
    pub v_min: f64,
    pub v_max: f64,
    pub n_points: usize,
    pub tau: f64,
    pub repetitions: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub mode: CrossTalkMode,
    /// Normalised inverse used for corrected combinations; `None` uses the
    /// configuration's own (perfect knowledge).
    #[serde(default)]
    pub normalized_inverse: Option<Matrix3<f64>>,
    /// Electrode voltages the scan is added to; `None` uses the DC setting.
    #[serde(default)]
    pub base_voltages: Option<Vector3<f64>>,
    /// Post-recapture variance window (s).
    #[serde(default = "default_window")]
    pub window: f64,
}

/// `window` rounded to a whole number (at least one) of periods at `omega`.
/// Over a fractional period the variance of the force-driven oscillation
/// depends on its phase at recapture, which changes with tau.
fn whole_periods(window: f64, omega: f64) -> f64 {
    let period = 2.0 * std::f64::consts::PI / omega;
    (window / period).round().max(1.0) * period
}

fn default_window() -> f64 {
    40e-6
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self::new(Axis::Z, (-1.0, 1.0), 11, 20e-6)
    }
}

impl ScanSpec {
    pub fn new(axis: Axis, v_range: (f64, f64), n_points: usize, tau: f64) -> Self {
        Self {
            axis,
            v_min: v_range.0,
            v_max: v_range.1,
            n_points,
            tau,
            repetitions: 5,
            sampling: Sampling::Antithetic,
            mode: CrossTalkMode::Corrected,
            normalized_inverse: None,
            base_voltages: None,
            window: default_window(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_min < self.v_max) || !self.v_min.is_finite() || !self.v_max.is_finite() {
            return Err(Error::domain("scan range must satisfy v_min < v_max"));
        }
        if self.n_points < 4 {
            return Err(Error::domain("a scan needs at least 4 voltage points"));
        }
        if !(self.tau > 0.0) || !(self.window > 0.0) {
            return Err(Error::domain("tau and window must be > 0"));
        }
        check_reps(self.repetitions, self.sampling)
    }

    /// Electrode voltages per volt of scan variable.
    pub fn direction(&self, cfg: &SimConfig) -> Result<Vector3<f64>> {
        let i = self.axis.index();
        Ok(match self.mode {
            CrossTalkMode::Raw => Vector3::ith(i, 1.0),
            CrossTalkMode::Corrected => {
                let n = match &self.normalized_inverse {
                    Some(n) => *n,
                    None => cfg.electrodes.normalized_inverse()?,
                };
                n.column(i).into_owned()
            }
        })
    }
}

pub fn scan_voltages(spec: &ScanSpec) -> Vec<f64> {
    let n = spec.n_points;
    (0..n).map(|k| spec.v_min + (spec.v_max - spec.v_min) * k as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub axis: Axis,
    pub tau: f64,
    pub repetitions: usize,
    pub voltages: Vec<f64>,
    /// Per repetition, point-major; `None` where the particle was lost.
    pub energies: Vec<Option<f64>>,
    /// Mean over repetitions; `None` for points excluded from the fit.
    pub mean_energies: Vec<Option<f64>>,
    pub energy_se: Vec<Option<f64>>,
    pub fit: ParabolaFit,
    pub v_opt: f64,
    pub v_opt_ci: f64,
    pub direction: Vector3<f64>,
    pub base_voltages: Vector3<f64>,
}

impl ScanResult {
    /// Electrode voltages at the fitted optimum.
    pub fn optimum_voltages(&self) -> Vector3<f64> {
        self.base_voltages + self.direction * self.v_opt
    }

    pub fn valid_points(&self) -> usize {
        self.mean_energies.iter().flatten().count()
    }
}

/// Cool, release for `tau`, recapture, and take the energy from the
/// post-recapture variance of the scanned axis, for each voltage.
///
/// Points where any repetition lost the particle are excluded from the fit.
/// The variance window is rounded to whole periods of the scanned mode.
pub fn compensation_scan(spec: &ScanSpec, cfg: &SimConfig, seed: u64) -> Result<ScanResult> {
    spec.validate()?;
    let axis = spec.axis.index();
    let dir = spec.direction(cfg)?;
    let base = spec.base_voltages.unwrap_or_else(|| cfg.dc());
    let window = whole_periods(spec.window, cfg.trap.omega[axis]);
    let timing = ReleaseTiming::new(spec.tau, window);
    let sched = timing.schedule();
    let t_post = timing.analysis_start(&sched);
    let k = cfg.particle.mass * cfg.trap.omega[axis].powi(2);
    let voltages = scan_voltages(spec);
    let reps = spec.repetitions;

    let mut energies = Vec::with_capacity(voltages.len() * reps);
    let mut means = Vec::with_capacity(voltages.len());
    let mut ses = Vec::with_capacity(voltages.len());
    for (p, &v) in voltages.iter().enumerate() {
        let mut c = cfg.clone();
        c.dc_voltages = (base + dir * v).into();
        let mut runner = RepRunner::new(&c, &sched, seed, &format!("scan/{}/{p}", spec.axis), spec.sampling, reps)?;
        runner.record_start = t_post;
        let e: Vec<Option<f64>> = runner.run_all(reps, |_, tr| {
            if tr.lost {
                return Ok(None);
            }
            let x = calibrated(&tr, &c, axis);
            Ok(Some(k * windowed_variance(&x, tr.sample_rate, window)?))
        })?;
        if e.iter().all(Option::is_some) {
            let vals: Vec<f64> = e.iter().flatten().copied().collect();
            let m = vals.iter().sum::<f64>() / reps as f64;
            means.push(Some(m));
            ses.push(if reps > 1 {
                let var = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
                Some((var / reps as f64).sqrt())
            } else {
                None
            });
        } else {
            means.push(None);
            ses.push(None);
        }
        energies.extend(e);
    }
    let (fv, fe): (Vec<f64>, Vec<f64>) = voltages
        .iter()
        .zip(&means)
        .filter_map(|(v, e)| e.map(|e| (*v, e)))
        .unzip();
    if fv.is_empty() {
        return Err(Error::ParticleLost(format!("at every point of the {} V scan", spec.v_max - spec.v_min)));
    }
    if fv.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} of {} scan points kept the particle",
            fv.len(),
            voltages.len()
        )));
    }
    let fit = fit_parabola(&fv, &fe)?;
    Ok(ScanResult {
        axis: spec.axis,
        tau: spec.tau,
        repetitions: reps,
        voltages,
        energies,
        mean_energies: means,
        energy_se: ses,
        v_opt: fit.v_opt,
        v_opt_ci: fit.v_opt_ci,
        fit,
        direction: dir,
        base_voltages: base,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauScanResult {
    pub scans: Vec<ScanResult>,
    pub taus: Vec<f64>,
    /// Parabola curvature per tau and its standard error (J/V^2).
    pub curvature: Vec<f64>,
    pub curvature_se: Vec<f64>,
    pub scaling: TauScalingFit,
    pub ratio: f64,
    pub ratio_se: f64,
    pub expected_ratio: f64,
    pub v_opt: Vec<f64>,
    pub v_opt_ci: Vec<f64>,
    pub v_opt_trend: LineFit,
    /// Slope of `v_opt(tau)` is consistent with zero at 95%.
    pub v_opt_flat: bool,
}

/// Compensation scans at each `tau`. The voltage range of `template` applies
/// to the first `tau` and shrinks as `taus[0] / tau` about its centre.
pub fn tau_scan(taus: &[f64], template: &ScanSpec, cfg: &SimConfig, seed: u64) -> Result<TauScanResult> {
    if taus.len() < 3 {
        return Err(Error::domain("tau scan needs at least 3 release times"));
    }
    if taus.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("taus must be strictly increasing"));
    }
    let centre = 0.5 * (template.v_min + template.v_max);
    let half = 0.5 * (template.v_max - template.v_min);
    let mut scans = Vec::with_capacity(taus.len());
    for (i, &tau) in taus.iter().enumerate() {
        let h = half * taus[0] / tau;
        let spec = ScanSpec { tau, v_min: centre - h, v_max: centre + h, ..template.clone() };
        scans.push(compensation_scan(&spec, cfg, derive_seed(seed, &format!("tau/{i}")))?);
    }
    let curvature: Vec<f64> = scans.iter().map(|s| s.fit.a).collect();
    let curvature_se: Vec<f64> = scans.iter().map(|s| s.fit.a_ci / t95(s.fit.dof)).collect();
    let w: Vec<f64> = curvature_se.iter().map(|s| 1.0 / (s * s).max(f64::MIN_POSITIVE)).collect();
    let scaling = fit_tau_scaling(taus, &curvature, Some(&w))?;
    let ratio = scaling.ratio();
    let ratio_se = ratio.abs() * ((scaling.c2_se / scaling.c2).powi(2) + (scaling.c4_se / scaling.c4).powi(2)).sqrt();
    let v_opt: Vec<f64> = scans.iter().map(|s| s.v_opt).collect();
    let v_opt_ci: Vec<f64> = scans.iter().map(|s| s.v_opt_ci).collect();
    let wv: Vec<f64> = scans
        .iter()
        .map(|s| (t95(s.fit.dof) / s.v_opt_ci).powi(2).min(f64::MAX))
        .collect();
    let v_opt_trend = fit_line(taus, &v_opt, Some(&wv))?;
    Ok(TauScanResult {
        expected_ratio: cfg.trap.omega[template.axis.index()].powi(2) / 4.0,
        v_opt_flat: v_opt_trend.slope.abs() <= v_opt_trend.slope_ci,
        taus: taus.to_vec(),
        scans,
        curvature,
        curvature_se,
        scaling,
        ratio,
        ratio_se,
        v_opt,
        v_opt_ci,
        v_opt_trend,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationStep {
    pub tau: f64,
    pub axis: Axis,
    pub v_opt: f64,
    pub v_opt_ci: f64,
    /// Whether the scan produced a usable minimum and the voltages moved.
    pub applied: bool,
    pub voltages: Vector3<f64>,
    /// Ground-truth net static force at these voltages (N).
    pub residual_force: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compensation3d {
    pub voltages: Vector3<f64>,
    pub residual_force: Vector3<f64>,
    pub steps: Vec<CompensationStep>,
}

/// Iterative three-axis compensation: at each `tau`, scan z, x, y in turn
/// about the current voltages and move to each fitted optimum.
///
/// `template` supplies repetitions, sampling and cross-talk handling; its
/// `half_ranges[axis]` is the half-width at the first `tau`, shrinking as
/// `taus[0] / tau`.
pub fn compensate_3d(
    cfg: &SimConfig,
    taus: &[f64],
    half_ranges: [f64; 3],
    template: &ScanSpec,
    seed: u64,
) -> Result<Compensation3d> {
    if taus.is_empty() || taus.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::domain("tau schedule must be non-empty and increasing"));
    }
    if half_ranges.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::domain("half ranges must be > 0"));
    }
    let mut v = template.base_voltages.unwrap_or_else(|| cfg.dc());
    let mut steps = Vec::new();
    for (i, &tau) in taus.iter().enumerate() {
        for axis in [Axis::Z, Axis::X, Axis::Y] {
            let h = half_ranges[axis.index()] * taus[0] / tau;
            let spec = ScanSpec {
                axis,
                tau,
                v_min: -h,
                v_max: h,
                base_voltages: Some(v),
                ..template.clone()
            };
            let s = compensation_scan(&spec, cfg, derive_seed(seed, &format!("3d/{i}/{axis}")))?;
            let applied = s.fit.has_minimum && s.v_opt.is_finite();
            if applied {
                v += s.direction * s.v_opt.clamp(-h, h);
            }
            steps.push(CompensationStep {
                tau,
                axis,
                v_opt: s.v_opt,
                v_opt_ci: s.v_opt_ci,
                applied,
                voltages: v,
                residual_force: cfg.static_force(&v),
            });
        }
    }
    Ok(Compensation3d { voltages: v, residual_force: cfg.static_force(&v), steps })
}
