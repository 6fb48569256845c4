use serde::{Deserialize, Serialize};

use super::scan::{compensation_scan, ScanSpec};
use crate::analysis::{fit_exponential_drift, DriftFit};
use crate::model::{Axis, Environment};
use crate::rng::derive_seed;
use crate::{Error, Result, SimConfig};

/// Environment at `t` seconds into a session. The axial stray field is set
/// so that the z electrode alone would need `V(t)` to null it, i.e. the
/// stray force is `-C_zz V(t)`.
pub fn apply_environment_drift(cfg: &SimConfig, t: f64) -> Environment {
    let mut env = cfg.environment.clone();
    if let Some(d) = &cfg.environment.drift {
        let z = Axis::Z.index();
        env.stray_field.z = -cfg.electrodes.geometry[(z, z)] * d.volts_at(t);
    }
    env
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSession {
    pub times: Vec<f64>,
    /// Scan optima in scan-voltage units.
    pub v_opt: Vec<f64>,
    pub v_opt_ci: Vec<f64>,
    /// Optima converted to z-electrode volt equivalents.
    pub volt_equivalent: Vec<f64>,
    pub fit: DriftFit,
}

/// Repeats the template scan at each session time and fits
/// `V_f + V_0 exp(-t / RC)` to the optima.
pub fn drift_session(cfg: &SimConfig, times: &[f64], template: &ScanSpec, seed: u64) -> Result<DriftSession> {
    if cfg.environment.drift.is_none() {
        return Err(Error::domain("environment.drift is not configured"));
    }
    if template.axis != Axis::Z {
        return Err(Error::domain("drift sessions scan the z axis"));
    }
    if times.len() < 4 {
        return Err(Error::domain("need at least 4 session times"));
    }
    let z = Axis::Z.index();
    let (mut v_opt, mut v_opt_ci, mut volts) = (Vec::new(), Vec::new(), Vec::new());
    for (k, t) in times.iter().enumerate() {
        let mut c = cfg.clone();
        c.environment = apply_environment_drift(cfg, *t);
        let r = compensation_scan(template, &c, derive_seed(seed, &format!("drift/{k}")))?;
        let v = r.v_opt;
        let per_volt = (cfg.electrodes.transduction * r.direction)[z] / cfg.electrodes.transduction[(z, z)];
        v_opt.push(v);
        v_opt_ci.push(r.v_opt_ci);
        volts.push(v * per_volt);
    }
    let fit = fit_exponential_drift(times, &volts)?;
    Ok(DriftSession { times: times.to_vec(), v_opt, v_opt_ci, volt_equivalent: volts, fit })
}
