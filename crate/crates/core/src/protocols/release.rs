use serde::{Deserialize, Serialize};

use super::{calibrated, check_reps, slice_between, RepRunner, Sampling};
use crate::analysis::{ensemble_stats, fit_sine, SineFit};
use crate::analytics::{mean_energy_after_release, recapture_variance_max};
use crate::dynamics::{thermal_variances, PulseSchedule};
use crate::{Error, Result, SimConfig};

/// Timing of a single cool, release, recapture sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseTiming {
    /// Trapped time before the trap-off command; feedback is cut 1 us
    /// before release, so this must exceed 1 us.
    pub lead: f64,
    pub tau: f64,
    /// Wait after the recapture ramp before the analysis window opens.
    pub settle: f64,
    /// Length of the analysis window.
    pub window: f64,
}

impl ReleaseTiming {
    pub fn new(tau: f64, window: f64) -> Self {
        Self { lead: 2e-6, tau, settle: 0.5e-6, window }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lead > 1.0e-6) || !self.lead.is_finite() {
            return Err(Error::domain("lead must exceed 1 us"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::domain("tau must be > 0"));
        }
        if !(self.settle >= 0.0) || !(self.window > 0.0) {
            return Err(Error::domain("settle must be >= 0 and window > 0"));
        }
        Ok(())
    }

    /// Release, free flight, recapture, then feedback stays off through the
    /// analysis window.
    pub fn schedule(&self) -> PulseSchedule {
        let probe = PulseSchedule::steady(1.0);
        let start = self.analysis_start(&probe);
        PulseSchedule::release_recapture(self.lead, self.tau, f64::INFINITY, start + self.window + 1e-6)
    }

    /// Middle of the trap-off ramp.
    pub fn release_mid(&self, s: &PulseSchedule) -> f64 {
        self.lead + s.trap_trigger_delay + 0.5 * s.trap_rise_fall
    }

    /// Middle of the trap-on ramp.
    pub fn recapture_mid(&self, s: &PulseSchedule) -> f64 {
        self.release_mid(s) + self.tau
    }

    pub fn analysis_start(&self, s: &PulseSchedule) -> f64 {
        self.lead + self.tau + s.trap_trigger_delay + s.trap_rise_fall + self.settle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReleaseOptions {
    pub repetitions: usize,
    pub sampling: Sampling,
    /// Pre-release window fitted for the initial energy.
    pub pre_window: f64,
    /// Post-recapture window fitted for the final state.
    pub post_window: f64,
    /// Sub-ensembles for the error of the maximum width.
    pub n_bins: usize,
}

impl Default for ReleaseOptions {
    fn default() -> Self {
        Self { repetitions: 150, sampling: Sampling::MomentMatched, pre_window: 25e-6, post_window: 25e-6, n_bins: 10 }
    }
}

/// Axial ensemble statistics of one release time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasePoint {
    pub tau: f64,
    pub repetitions: usize,
    pub lost: usize,
    /// Mean oscillation energy before release and after recapture (J).
    pub energy_pre: f64,
    pub energy_post: f64,
    pub energy_ratio: f64,
    pub energy_ratio_se: f64,
    /// Closed-form ratio for the measured initial energy and the static force.
    pub predicted_ratio: f64,
    /// Largest ensemble width over one post-recapture oscillation (m).
    pub max_std: f64,
    pub max_std_error: f64,
    pub predicted_max_std: f64,
    /// Mean axial displacement between release and recapture (m).
    pub mean_displacement: f64,
    pub displacement_se: f64,
    pub predicted_displacement: f64,
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Release-recapture ensembles along z for each free-flight time.
///
/// Each repetition fits `a sin(Omega t + phi) + b t + c` to the calibrated
/// axial channel before release and after recapture.
pub fn release_ensemble(taus: &[f64], cfg: &SimConfig, seed: u64, opts: &ReleaseOptions) -> Result<Vec<ReleasePoint>> {
    check_reps(opts.repetitions, opts.sampling)?;
    if opts.repetitions < opts.n_bins.max(2) {
        return Err(Error::domain("need at least one repetition per bin"));
    }
    let z = 2;
    let omega = cfg.trap.omega[z];
    let m = cfg.particle.mass;
    let f_z = cfg.static_force(&cfg.dc())[z];
    let (pv, mv) = thermal_variances(cfg.initial_nbar, &cfg.trap, &cfg.particle)?;

    taus.iter()
        .enumerate()
        .map(|(i, &tau)| {
            let timing = ReleaseTiming {
                lead: opts.pre_window + 1.5e-6,
                tau,
                settle: 0.5e-6,
                window: opts.post_window,
            };
            timing.validate()?;
            let sched = timing.schedule();
            let mut runner = RepRunner::new(
                cfg,
                &sched,
                seed,
                &format!("release/{i}"),
                opts.sampling,
                opts.repetitions,
            )?;
            runner.record_states = true;
            let t_rel = timing.release_mid(&sched);
            let t_cap = timing.recapture_mid(&sched);
            let t_post = timing.analysis_start(&sched);
            let per: Vec<Option<(SineFit, SineFit, f64)>> = runner.run_all(opts.repetitions, |_, tr| {
                if tr.lost {
                    return Ok(None);
                }
                let x = calibrated(&tr, cfg, z);
                let (t0, y0) = slice_between(&tr, &x, 0.0, opts.pre_window);
                let (t1, y1) = slice_between(&tr, &x, t_post, t_post + opts.post_window);
                let pre = fit_sine(&t0, &y0, omega)?;
                let post = fit_sine(&t1, &y1, omega)?;
                let a = tr.index_at(t_rel).expect("non-empty");
                let b = tr.index_at(t_cap).expect("non-empty");
                Ok(Some((pre, post, tr.states[b].position[z] - tr.states[a].position[z])))
            })?;
            let ok: Vec<_> = per.into_iter().flatten().collect();
            let lost = opts.repetitions - ok.len();
            if ok.is_empty() {
                return Err(Error::ParticleLost(format!("in all repetitions at tau = {tau:e} s")));
            }
            if ok.len() < opts.n_bins.max(2) {
                return Err(Error::InsufficientData(format!("only {} repetitions survived at tau = {tau:e} s", ok.len())));
            }
            let k = 0.5 * m * omega * omega;
            let a_pre: Vec<f64> = ok.iter().map(|o| k * o.0.amplitude.powi(2)).collect();
            let a_post: Vec<f64> = ok.iter().map(|o| k * o.1.amplitude.powi(2)).collect();
            let disp: Vec<f64> = ok.iter().map(|o| o.2).collect();
            let (ep, ep_se) = mean_se(&a_pre);
            let (eq, eq_se) = mean_se(&a_post);
            let n = ok.len() as f64;
            let cov = a_pre.iter().zip(&a_post).map(|(p, q)| (p - ep) * (q - eq)).sum::<f64>() / (n - 1.0) / n;
            let ratio = eq / ep;
            let rel2 = (eq_se / eq).powi(2) + (ep_se / ep).powi(2) - 2.0 * cov / (ep * eq);
            let posts: Vec<SineFit> = ok.iter().map(|o| o.1).collect();
            let ens = ensemble_stats(&posts, omega, m, opts.n_bins)?;
            let (md, md_se) = mean_se(&disp);
            Ok(ReleasePoint {
                tau,
                repetitions: opts.repetitions,
                lost,
                energy_pre: ep,
                energy_post: eq,
                energy_ratio: ratio,
                energy_ratio_se: ratio * rel2.max(0.0).sqrt(),
                predicted_ratio: mean_energy_after_release(ep, f_z, tau, omega, m)? / ep,
                max_std: ens.max_std,
                max_std_error: ens.max_std_error,
                predicted_max_std: recapture_variance_max(pv[z], mv[z], tau, omega, m)?.sqrt(),
                mean_displacement: md,
                displacement_se: md_se,
                predicted_displacement: f_z * tau * tau / (2.0 * m),
            })
        })
        .collect()
}
