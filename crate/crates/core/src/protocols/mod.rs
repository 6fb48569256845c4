//! The experimental procedures, each a pure function of a configuration and
//! a seed.
//!
//! Repetitions run on the rayon pool; repetition `k` always draws from the
//! stream `(seed, domain, k)`, so results do not depend on the thread count.

mod charge;
mod crosscool;
mod drift;
mod nonlinear;
mod recompress;
mod reheat;
mod release;
mod scan;

use nalgebra::{DMatrix, Vector3};
use rand_distr::StandardNormal;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{thermal_variances, PulseSchedule, RunOptions, Simulator, Trajectory};
use crate::rng::stream;
use crate::{Error, Result, SimConfig, StateVector};

pub use charge::{charge_measure, charge_step_sequence, ChargeMeasurement, ChargeStepResult, HistogramBin, CHARGE_SETTLE};
pub use crosscool::{cross_cool_calibrate, CrossCoolOptions, CrossTalkEstimate, GainSearch};
pub use drift::{apply_environment_drift, drift_session, DriftSession};
pub use nonlinear::{nonlinearity_scan, NonlinearityResult};
pub use recompress::{recompression_schedule, recompression_experiment, RecompressionOptions, RecompressionResult};
pub use reheat::{reheating_experiment, ReheatOptions, ReheatResult, ReheatSeries};
pub use release::{release_ensemble, ReleaseOptions, ReleasePoint, ReleaseTiming};
pub use scan::{
    compensate_3d, compensation_scan, scan_voltages, tau_scan, Compensation3d, CompensationStep, CrossTalkMode,
    ScanResult, ScanSpec, TauScanResult,
};

/// How the initial states and noise of a set of repetitions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every repetition is independent.
    Independent,
    /// Repetitions come in pairs sharing one stream, the second with every
    /// Gaussian draw negated.
    #[default]
    Antithetic,
    /// Initial states are centred and whitened so the ensemble has exactly
    /// the thermal mean and covariance; noise is independent.
    MomentMatched,
}

/// Per-repetition run driver for one schedule.
pub(crate) struct RepRunner<'a> {
    sim: Simulator<'a>,
    seed: u64,
    domain: String,
    sampling: Sampling,
    initial: Vec<StateVector>,
    pub record_states: bool,
    pub record_start: f64,
}

impl<'a> RepRunner<'a> {
    pub fn new(
        cfg: &'a SimConfig,
        schedule: &PulseSchedule,
        seed: u64,
        domain: &str,
        sampling: Sampling,
        reps: usize,
    ) -> Result<Self> {
        let sim = Simulator::new(cfg, schedule)?;
        let initial = if sampling == Sampling::MomentMatched {
            let eq = sim.equilibrium();
            moment_matched_states(cfg, reps, seed, domain)?
                .into_iter()
                .map(|s| StateVector::new(s.position + eq, s.momentum))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            sim,
            seed,
            domain: domain.to_string(),
            sampling,
            initial,
            record_states: false,
            record_start: 0.0,
        })
    }

    pub fn run(&self, k: usize) -> Result<Trajectory> {
        let mut opts = RunOptions {
            record_states: self.record_states,
            record_start: self.record_start,
            ..Default::default()
        };
        let index = match self.sampling {
            Sampling::Independent => k,
            Sampling::Antithetic => {
                opts.antithetic = k % 2 == 1;
                k / 2
            }
            Sampling::MomentMatched => {
                opts.initial = Some(*self.initial.get(k).ok_or_else(|| {
                    Error::domain(format!("repetition {k} beyond the moment-matched ensemble"))
                })?);
                k
            }
        };
        self.sim.run(&mut stream(self.seed, &self.domain, index as u64), &opts)
    }

    pub fn run_all<T: Send>(&self, reps: usize, f: impl Fn(usize, Trajectory) -> Result<T> + Sync) -> Result<Vec<T>> {
        (0..reps).into_par_iter().map(|k| f(k, self.run(k)?)).collect()
    }
}

/// Thermal ensemble of `n` states about the origin whose sample mean is zero
/// and whose sample covariance (normalised by `n - 1`) equals the thermal
/// covariance exactly.
pub fn moment_matched_states(cfg: &SimConfig, n: usize, seed: u64, domain: &str) -> Result<Vec<StateVector>> {
    if n < 8 {
        return Err(Error::domain("moment matching needs at least 8 repetitions"));
    }
    let (pv, mv) = thermal_variances(cfg.initial_nbar, &cfg.trap, &cfg.particle)?;
    let mut rng = stream(seed, &format!("{domain}/initial"), 0);
    let mut z = DMatrix::<f64>::from_fn(n, 6, |_, _| rng.sample(StandardNormal));
    for j in 0..6 {
        let m = z.column(j).mean();
        z.column_mut(j).add_scalar_mut(-m);
    }
    let cov = z.transpose() * &z / (n as f64 - 1.0);
    let l = cov.cholesky().ok_or_else(|| Error::Singular("degenerate ensemble draw".into()))?.l();
    // Rows of z times L^-T have identity sample covariance.
    let w = l
        .solve_lower_triangular(&z.transpose())
        .ok_or_else(|| Error::Singular("degenerate ensemble draw".into()))?;
    let sd: Vec<f64> = pv.iter().chain(mv.iter()).map(|v| v.sqrt()).collect();
    Ok((0..n)
        .map(|k| {
            StateVector::new(
                Vector3::new(w[(0, k)] * sd[0], w[(1, k)] * sd[1], w[(2, k)] * sd[2]),
                Vector3::new(w[(3, k)] * sd[3], w[(4, k)] * sd[4], w[(5, k)] * sd[5]),
            )
        })
        .collect())
}

/// Detector channel `axis` converted to metres with its nominal gain.
pub(crate) fn calibrated(traj: &Trajectory, cfg: &SimConfig, axis: usize) -> Vec<f64> {
    let g = cfg.detectors.channels[axis].axis_gain(axis);
    traj.detector_channels[axis].iter().map(|v| v / g).collect()
}

/// Slice of a calibrated trace between two absolute times.
pub(crate) fn slice_between(traj: &Trajectory, trace: &[f64], t0: f64, t1: f64) -> (Vec<f64>, Vec<f64>) {
    let r = traj.window(t0, t1);
    (traj.times[r.clone()].iter().map(|t| t - t0).collect(), trace[r].to_vec())
}

pub(crate) fn check_reps(reps: usize, sampling: Sampling) -> Result<()> {
    if reps == 0 {
        return Err(Error::domain("repetitions must be >= 1"));
    }
    if sampling == Sampling::MomentMatched && reps < 8 {
        return Err(Error::domain("moment-matched sampling needs >= 8 repetitions"));
    }
    Ok(())
}
