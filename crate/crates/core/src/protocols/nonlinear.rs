use serde::{Deserialize, Serialize};

use super::scan::{compensation_scan, ScanResult, ScanSpec};
use crate::analysis::{fit_gaussian, fit_parabola, GaussianFit, ParabolaFit};
use crate::analytics::displacement_from_voltage;
use crate::{Error, Result, SimConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityResult {
    pub scan: ScanResult,
    /// Parabola fitted to the points within `inner_fraction` of the centre.
    pub inner_fit: ParabolaFit,
    /// Gaussian fitted to all points; `None` when it did not converge.
    pub gaussian: Option<GaussianFit>,
    /// Free-flight displacement of each scan point relative to the optimum (m).
    pub displacements: Vec<f64>,
    /// `(data - parabola) / standard error` per point.
    pub deviation_sigma: Vec<Option<f64>>,
    /// Smallest displacement from which the data stay more than 3 sigma off
    /// the parabola out to the end of the scan; `None` if never.
    pub onset_displacement: Option<f64>,
}

/// Wide compensation scan whose outer points probe the trap anharmonicity.
///
/// `spec.v_min..spec.v_max` should extend well beyond the parabolic region;
/// the trap shape comes from `cfg`.
pub fn nonlinearity_scan(spec: &ScanSpec, inner_fraction: f64, cfg: &SimConfig, seed: u64) -> Result<NonlinearityResult> {
    if !(inner_fraction > 0.0 && inner_fraction < 1.0) {
        return Err(Error::domain("inner fraction must lie in (0, 1)"));
    }
    if spec.repetitions < 2 {
        return Err(Error::domain("need >= 2 repetitions for point errors"));
    }
    let scan = compensation_scan(spec, cfg, seed)?;
    let axis = spec.axis.index();
    let centre = 0.5 * (spec.v_min + spec.v_max);
    let half = 0.5 * (spec.v_max - spec.v_min);
    let (iv, ie): (Vec<f64>, Vec<f64>) = scan
        .voltages
        .iter()
        .zip(&scan.mean_energies)
        .filter(|(v, _)| (*v - centre).abs() <= inner_fraction * half + 1e-12)
        .filter_map(|(v, e)| e.map(|e| (*v, e)))
        .unzip();
    let inner_fit = fit_parabola(&iv, &ie)?;
    let (av, ae): (Vec<f64>, Vec<f64>) =
        scan.voltages.iter().zip(&scan.mean_energies).filter_map(|(v, e)| e.map(|e| (*v, e))).unzip();
    let gaussian = fit_gaussian(&av, &ae).ok().filter(|g| g.converged);

    let cnv = cfg.electrodes.force(&scan.direction)[axis];
    let displacements: Vec<f64> = scan
        .voltages
        .iter()
        .map(|v| displacement_from_voltage(cnv, v - inner_fit.v_opt, spec.tau, cfg.particle.mass))
        .collect::<Result<_>>()?;
    let deviation_sigma: Vec<Option<f64>> = scan
        .voltages
        .iter()
        .zip(scan.mean_energies.iter().zip(&scan.energy_se))
        .map(|(v, (e, se))| match (e, se) {
            (Some(e), Some(se)) if *se > 0.0 => Some((e - inner_fit.eval(*v)) / se),
            _ => None,
        })
        .collect();

    // Walk outwards on each side; the onset is where the deviation becomes
    // and stays significant.
    let n = scan.voltages.len();
    let centre_idx = (0..n)
        .min_by(|&a, &b| displacements[a].abs().total_cmp(&displacements[b].abs()))
        .expect("non-empty scan");
    let significant = |i: usize| deviation_sigma[i].is_none_or(|s| s.abs() > 3.0);
    let mut onset: Option<f64> = None;
    for side in [(centre_idx..n).collect::<Vec<_>>(), (0..=centre_idx).rev().collect()] {
        let mut start = None;
        for &i in &side {
            if significant(i) {
                start.get_or_insert(i);
            } else {
                start = None;
            }
        }
        if let Some(i) = start {
            let d = displacements[i].abs();
            onset = Some(onset.map_or(d, |o| o.min(d)));
        }
    }
    Ok(NonlinearityResult { scan, inner_fit, gaussian, displacements, deviation_sigma, onset_displacement: onset })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Axis, TrapShape};
    use nalgebra::Vector3;

    // Reaches ~480 nm at the largest voltage.
    fn wide(cfg: &SimConfig, tau: f64) -> ScanSpec {
        let per_volt = 1e-16 * tau * tau / (2.0 * cfg.particle.mass);
        let h = 450e-9 / per_volt;
        let mut s = ScanSpec::new(Axis::Z, (-h, h), 31, tau);
        s.repetitions = 6;
        s
    }

    #[test]
    fn harmonic_trap_shows_no_onset() {
        let mut c = SimConfig::reference();
        c.environment.gravity = Vector3::zeros();
        let r = nonlinearity_scan(&wide(&c, 15e-6), 0.3, &c, 4).unwrap();
        assert!(r.onset_displacement.is_none(), "{:?}", r.deviation_sigma);
    }

    #[test]
    fn gaussian_trap_onset_near_170_nm() {
        let mut c = SimConfig::reference().with_trap_shape(TrapShape::GaussianEllipsoid).unwrap();
        c.environment.gravity = Vector3::zeros();
        let r = nonlinearity_scan(&wide(&c, 15e-6), 0.3, &c, 4).unwrap();
        let d = r.onset_displacement.expect("onset");
        assert!((d / 170e-9 - 1.0).abs() < 0.3, "{d:e}");
    }
}
