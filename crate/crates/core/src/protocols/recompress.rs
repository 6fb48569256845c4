use serde::{Deserialize, Serialize};

use super::{calibrated, check_reps, slice_between, RepRunner, Sampling};
use crate::analysis::{ensemble_stats, fit_sine_fixed, SineFit};
use crate::analytics::{lyapunov_propagate, recompression_time, segments_from_schedule};
use crate::dynamics::{thermal_variances, Action, PulseSchedule};
use crate::{CovarianceState, Error, Result, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecompressionOptions {
    pub repetitions: usize,
    pub sampling: Sampling,
    pub post_window: f64,
    pub n_bins: usize,
    /// Programmed minus physical trapping time (s); the instrument stretches
    /// nothing, it only reports times late by this amount.
    pub instrument_offset: f64,
    /// Trap switching ramp and trigger latency (s).
    pub rise_fall: f64,
    pub trigger_delay: f64,
}

impl Default for RecompressionOptions {
    fn default() -> Self {
        Self {
            repetitions: 150,
            sampling: Sampling::MomentMatched,
            post_window: 25e-6,
            n_bins: 10,
            instrument_offset: 0.0,
            rise_fall: 170e-9,
            trigger_delay: 380e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecompressionResult {
    pub tau: f64,
    /// Programmed trapping times.
    pub tp: Vec<f64>,
    /// Ensemble maximum width after the final recapture (m).
    pub max_std: Vec<f64>,
    pub max_std_error: Vec<f64>,
    /// Same quantity from covariance propagation, without detector noise.
    pub covariance_max_std: Vec<f64>,
    pub sigma0: f64,
    /// Programmed trapping time at the Monte-Carlo minimum.
    pub tp_min: f64,
    /// `tp_min` corrected by the instrument offset.
    pub tp_min_physical: f64,
    pub predicted_tp: f64,
}

const LEAD: f64 = 2e-6;
const SETTLE: f64 = 0.5e-6;

/// Free `tau`, trapped `tp`, free `tau`, recaptured; feedback off from 1 us
/// before the first release.
pub fn recompression_schedule(tau: f64, tp: f64, window: f64, o: &RecompressionOptions) -> Result<PulseSchedule> {
    if !(tau > 0.0) || !(tp > 0.0) {
        return Err(Error::domain("tau and physical tp must be > 0"));
    }
    let mut base = PulseSchedule::steady(1.0);
    base.trap_rise_fall = o.rise_fall;
    base.trap_trigger_delay = o.trigger_delay;
    let start = post_start(&base, tau, tp);
    let s = PulseSchedule { total_duration: start + window + 1e-6, ..base }
        .with_event(LEAD - 1e-6, Action::FeedbackOff)
        .with_event(LEAD, Action::TrapOff)
        .with_event(LEAD + tau, Action::TrapOn)
        .with_event(LEAD + tau + tp, Action::TrapOff)
        .with_event(LEAD + 2.0 * tau + tp, Action::TrapOn);
    s.validate()?;
    Ok(s)
}

fn post_start(s: &PulseSchedule, tau: f64, tp: f64) -> f64 {
    LEAD + 2.0 * tau + tp + s.trap_trigger_delay + s.trap_rise_fall + SETTLE
}

/// Largest variance over one oscillation of a trapped 2x2 block
/// `[[var_x, cov_xp], [cov_xp, var_p]]`.
fn oscillation_max(block: [[f64; 2]; 2], mass: f64, omega: f64) -> f64 {
    let k = mass * omega;
    let a = block[0][0];
    let b = block[1][1] / (k * k);
    let c = block[0][1] / k;
    0.5 * (a + b) + (0.25 * (a - b).powi(2) + c * c).sqrt()
}

/// Axial recompression versus programmed trapping time.
pub fn recompression_experiment(
    tau: f64,
    tp: &[f64],
    cfg: &SimConfig,
    seed: u64,
    o: &RecompressionOptions,
) -> Result<RecompressionResult> {
    check_reps(o.repetitions, o.sampling)?;
    if tp.len() < 3 {
        return Err(Error::domain("need at least 3 trapping times"));
    }
    if o.repetitions < o.n_bins.max(2) {
        return Err(Error::domain("need at least one repetition per bin"));
    }
    let z = 2;
    let m = cfg.particle.mass;
    let omega = cfg.trap.omega[z];
    let (pv, mv) = thermal_variances(cfg.initial_nbar, &cfg.trap, &cfg.particle)?;
    let sigma0 = CovarianceState::diagonal(pv, mv)?;

    let mut max_std = Vec::with_capacity(tp.len());
    let mut max_err = Vec::with_capacity(tp.len());
    let mut cov_curve = Vec::with_capacity(tp.len());
    for &tpp in tp {
        let phys = tpp - o.instrument_offset;
        let sched = recompression_schedule(tau, phys, o.post_window, o)?;
        let t0 = post_start(&sched, tau, phys);
        // The same streams and initial states for every trapping time.
        let mut runner = RepRunner::new(cfg, &sched, seed, "recompress", o.sampling, o.repetitions)?;
        runner.record_start = t0;
        let fits: Vec<Option<SineFit>> = runner.run_all(o.repetitions, |_, tr| {
            if tr.lost {
                return Ok(None);
            }
            let x = calibrated(&tr, cfg, z);
            let (t, y) = slice_between(&tr, &x, t0, t0 + o.post_window);
            Ok(Some(fit_sine_fixed(&t, &y, omega)?))
        })?;
        let fits: Vec<SineFit> = fits.into_iter().flatten().collect();
        if fits.is_empty() {
            return Err(Error::ParticleLost(format!("in all repetitions at t_p = {tpp:e} s")));
        }
        let st = ensemble_stats(&fits, omega, m, o.n_bins)?;
        max_std.push(st.max_std);
        max_err.push(st.max_std_error);

        let mut cs = sched.clone();
        cs.total_duration = t0;
        let segs = segments_from_schedule(&cs, cfg, false, 16)?;
        let s = lyapunov_propagate(&sigma0, &segs)?;
        cov_curve.push(oscillation_max(s.axis_block(z), m, omega).sqrt());
    }
    let imin = (0..tp.len()).min_by(|&a, &b| max_std[a].total_cmp(&max_std[b])).expect("non-empty");
    Ok(RecompressionResult {
        tau,
        tp: tp.to_vec(),
        max_std,
        max_std_error: max_err,
        covariance_max_std: cov_curve,
        sigma0: pv[z].sqrt(),
        tp_min: tp[imin],
        tp_min_physical: tp[imin] - o.instrument_offset,
        predicted_tp: recompression_time(tau, omega, 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{recapture_variance_max, SegmentModel};
    use nalgebra::Vector3;

    fn quiet() -> SimConfig {
        let mut c = SimConfig::reference();
        c.environment.gravity = Vector3::zeros();
        c
    }

    #[test]
    fn oscillation_max_matches_closed_form() {
        let c = quiet();
        let m = c.particle.mass;
        let w = c.trap.omega;
        let (pv, mv) = thermal_variances(c.initial_nbar, &c.trap, &c.particle).unwrap();
        let s0 = CovarianceState::diagonal(pv, mv).unwrap();
        let seg = SegmentModel::free(m, 0.0, [0.0; 3], 30e-6).unwrap();
        let s = lyapunov_propagate(&s0, &[seg]).unwrap();
        let got = oscillation_max(s.axis_block(2), m, w[2]);
        let want = recapture_variance_max(pv[2], mv[2], 30e-6, w[2], m).unwrap();
        assert!((got / want - 1.0).abs() < 1e-9);
    }

    #[test]
    fn covariance_curve_returns_to_initial_width_at_optimum() {
        let tau = 5e-6;
        let mut c = quiet();
        let tps = recompression_time(tau, c.trap.omega[2], 1).unwrap();
        let tps = [tps - 40e-9, tps, tps + 40e-9];
        let o = RecompressionOptions { repetitions: 20, n_bins: 2, ..Default::default() };
        // Heating during the sequence is amplified by the squeeze, so the
        // minimum sits above the initial width but at the same place.
        let r = recompression_experiment(tau, &tps, &c, 1, &o).unwrap();
        assert!(r.covariance_max_std[1] < r.covariance_max_std[0].min(r.covariance_max_std[2]));
        assert!(r.covariance_max_std[1] > r.sigma0);

        c.environment = crate::Environment::vacuum();
        let o = RecompressionOptions { rise_fall: 0.0, ..o };
        let r = recompression_experiment(tau, &tps, &c, 1, &o).unwrap();
        assert!((r.covariance_max_std[1] / r.sigma0 - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn schedule_rejects_non_positive_times() {
        let o = RecompressionOptions::default();
        assert!(recompression_schedule(5e-6, 0.0, 1e-6, &o).is_err());
        assert!(recompression_schedule(5e-6, 6e-6, 1e-6, &o).is_ok());
    }
}
