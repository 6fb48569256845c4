//! One function per subcommand. Each returns its tables and the JSON result
//! for the summary; writing them out is left to the caller.

use std::f64::consts::PI;
use std::path::Path;

use levisim::analysis::{
    fit_exponential_drift, fit_gaussian, fit_line, fit_parabola, fit_sine, fit_tau_scaling, psd_welch,
};
use levisim::analytics::{
    ellipse_angle, free_expansion_variance, mean_energy_after_release, recapture_variance_max, recompression_time,
};
use levisim::dynamics::{thermal_variances, PulseSchedule, RunOptions, Simulator};
use levisim::protocols::{
    charge_measure, charge_step_sequence, compensate_3d, compensation_scan, cross_cool_calibrate,
    nonlinearity_scan, recompression_experiment, reheating_experiment, tau_scan, ChargeMeasurement,
};
use levisim::rng::stream;
use levisim::{Error, SimConfig};
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Protocols;
use crate::output::{num, Table};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Numerical(String),
    Lost(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
            CliError::Lost(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Lost(m) => write!(f, "particle lost: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::ParticleLost(m) => CliError::Lost(m),
            Error::Domain(_) | Error::Schedule(_) | Error::Config(_) => CliError::Config(e.to_string()),
            Error::Numerical(_) | Error::Singular(_) | Error::InsufficientData(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub struct Outcome {
    pub tables: Vec<(String, Table)>,
    pub result: Value,
    /// The only repetition lost the particle; outputs are still written.
    pub lost: bool,
}

fn outcome(tables: Vec<(&str, Table)>, result: &impl Serialize) -> Result<Outcome, CliError> {
    Ok(Outcome {
        tables: tables.into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        result: serde_json::to_value(result).map_err(|e| CliError::Numerical(e.to_string()))?,
        lost: false,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn simulate(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.simulate;
    let sched = match (&s.schedule, &s.release) {
        (Some(sc), _) => sc.clone(),
        (None, Some(r)) => {
            PulseSchedule::release_recapture(r.time, r.tau, r.hold_off.unwrap_or(f64::INFINITY), s.duration)
        }
        (None, None) => PulseSchedule::steady(s.duration),
    };
    let sim = Simulator::new(cfg, &sched)?;
    let opts = RunOptions { record_states: s.record_states, drive: s.drive, ..Default::default() };
    let tr = sim.run(&mut stream(seed, "simulate", 0), &opts)?;

    let mut headers = vec!["time_s"];
    if s.record_states {
        headers.extend(["x_m", "y_m", "z_m", "px_kg_m_s", "py_kg_m_s", "pz_kg_m_s"]);
    }
    headers.extend(["det_x_V", "det_y_V", "det_z_V", "envelope"]);
    let mut t = Table::new(&headers);
    for k in 0..tr.len() {
        let mut row = vec![tr.times[k]];
        if s.record_states {
            let st = &tr.states[k];
            row.extend(st.position.iter().chain(st.momentum.iter()));
        }
        row.extend((0..3).map(|c| tr.detector_channels[c][k]));
        row.push(tr.envelope[k]);
        t.push_nums(&row);
    }
    let result = json!({
        "samples": tr.len(),
        "sample_rate_hz": tr.sample_rate,
        "lost": tr.lost,
        "lost_at_s": tr.lost_at,
        "schedule": sched,
    });
    let mut o = outcome(vec![("trajectory", t)], &result)?;
    o.lost = tr.lost;
    Ok(o)
}

pub fn scan(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let r = compensation_scan(&p.scan, cfg, seed)?;
    let mut points = Table::new(&["voltage_V", "repetition", "energy_J"]);
    for (i, v) in r.voltages.iter().enumerate() {
        for k in 0..r.repetitions {
            points.push(vec![num(*v), k.to_string(), opt(r.energies[i * r.repetitions + k])]);
        }
    }
    let mut means = Table::new(&["voltage_V", "mean_energy_J", "energy_se_J", "fit_energy_J"]);
    for (i, v) in r.voltages.iter().enumerate() {
        means.push(vec![num(*v), opt(r.mean_energies[i]), opt(r.energy_se[i]), num(r.fit.eval(*v))]);
    }
    outcome(vec![("scan", points), ("scan_mean", means)], &r)
}

pub fn tau_scan_cmd(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.tau_scan;
    let r = tau_scan(&s.taus, &s.scan, cfg, seed)?;
    let mut t = Table::new(&["tau_s", "curvature_J_per_V2", "curvature_se_J_per_V2", "v_opt_V", "v_opt_ci_V"]);
    for i in 0..r.taus.len() {
        t.push_nums(&[r.taus[i], r.curvature[i], r.curvature_se[i], r.v_opt[i], r.v_opt_ci[i]]);
    }
    outcome(vec![("tau_scan", t)], &r)
}

pub fn compensate3d(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.compensate3d;
    let r = compensate_3d(cfg, &s.taus, s.half_ranges, &s.scan, seed)?;
    let mut t = Table::new(&[
        "step", "tau_s", "axis", "v_opt_V", "v_opt_ci_V", "applied", "vx_V", "vy_V", "vz_V", "fx_N", "fy_N", "fz_N",
    ]);
    for (i, st) in r.steps.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            num(st.tau),
            st.axis.name().to_string(),
            num(st.v_opt),
            num(st.v_opt_ci),
            st.applied.to_string(),
        ];
        row.extend(st.voltages.iter().chain(st.residual_force.iter()).map(|v| num(*v)));
        t.push(row);
    }
    outcome(vec![("compensate3d", t)], &r)
}

pub fn calibrate_crosstalk(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let r = cross_cool_calibrate(cfg, seed, &p.calibrate_crosstalk)?;
    let mut t = Table::new(&[
        "mode", "electrode", "gain_per_s", "ratio", "ratio_uncertainty", "residual", "iterations", "bracketed",
    ]);
    for s in &r.searches {
        t.push(vec![
            s.mode.name().to_string(),
            s.electrode.name().to_string(),
            num(s.gain),
            num(s.ratio),
            num(s.ratio_uncertainty),
            num(s.residual),
            s.iterations.to_string(),
            s.bracketed.to_string(),
        ]);
    }
    let mut m = Table::new(&["row", "col", "normalized_inverse", "uncertainty"]);
    for i in 0..3 {
        for j in 0..3 {
            m.push(vec![
                i.to_string(),
                j.to_string(),
                num(r.normalized_inverse_hat[(i, j)]),
                num(r.uncertainty[(i, j)]),
            ]);
        }
    }
    outcome(vec![("crosstalk_searches", t), ("crosstalk_matrix", m)], &r)
}

pub fn recompress(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.recompress;
    let tp = match &s.tp {
        Some(tp) => tp.clone(),
        None => {
            if !(s.step > 0.0) || !(s.half_span >= s.step) {
                return Err(CliError::Config("protocols.recompress: need step > 0 and half_span >= step".into()));
            }
            let centre = recompression_time(s.tau, cfg.trap.omega[2], 1)? + s.options.instrument_offset;
            let n = (s.half_span / s.step).round() as i64;
            (-n..=n).map(|k| centre + k as f64 * s.step).collect()
        }
    };
    let r = recompression_experiment(s.tau, &tp, cfg, seed, &s.options)?;
    let mut t = Table::new(&["tp_s", "max_std_m", "max_std_error_m", "covariance_max_std_m"]);
    for i in 0..r.tp.len() {
        t.push_nums(&[r.tp[i], r.max_std[i], r.max_std_error[i], r.covariance_max_std[i]]);
    }
    outcome(vec![("recompress", t)], &r)
}

pub fn reheat(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.reheat;
    let biases: Vec<Vector3<f64>> = s.biases.iter().map(|b| Vector3::from(*b)).collect();
    let r = reheating_experiment(&biases, s.duration, cfg, seed, &s.options)?;
    let mut curve = Table::new(&["series", "bias_x_V", "bias_y_V", "bias_z_V", "time_s", "mean_energy_J"]);
    let mut rates = Table::new(&[
        "series", "bias_x_V", "bias_y_V", "bias_z_V", "rate_J_per_s", "rate_se_J_per_s", "excess_rate_J_per_s",
        "excess_rate_se_J_per_s", "lost",
    ]);
    for (i, se) in r.series.iter().enumerate() {
        let b = [se.bias.x, se.bias.y, se.bias.z].map(num);
        for (t, e) in se.times.iter().zip(&se.mean_energy) {
            let mut row = vec![i.to_string()];
            row.extend(b.iter().cloned());
            row.extend([num(*t), num(*e)]);
            curve.push(row);
        }
        let mut row = vec![i.to_string()];
        row.extend(b.iter().cloned());
        row.extend([se.rate, se.rate_se, se.excess_rate, se.excess_rate_se].map(num));
        row.push(se.lost.to_string());
        rates.push(row);
    }
    outcome(vec![("reheat", curve), ("reheat_rates", rates)], &r)
}

pub fn nonlinearity(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.nonlinearity;
    let c = match s.trap_shape {
        Some(shape) => cfg.with_trap_shape(shape)?,
        None => cfg.clone(),
    };
    let r = nonlinearity_scan(&s.scan, s.inner_fraction, &c, seed)?;
    let mut t = Table::new(&[
        "voltage_V", "displacement_m", "mean_energy_J", "energy_se_J", "inner_fit_energy_J", "deviation_sigma",
    ]);
    for (i, v) in r.scan.voltages.iter().enumerate() {
        t.push(vec![
            num(*v),
            num(r.displacements[i]),
            opt(r.scan.mean_energies[i]),
            opt(r.scan.energy_se[i]),
            num(r.inner_fit.eval(*v)),
            opt(r.deviation_sigma[i]),
        ]);
    }
    outcome(vec![("nonlinearity", t)], &r)
}

fn charge_row(t: &mut Table, i: usize, m: &ChargeMeasurement) {
    t.push(vec![
        i.to_string(),
        m.charge_q.to_string(),
        num(m.amplitude),
        num(m.phase),
        num(m.signed_amplitude),
        num(m.noise_floor),
        num(m.inferred_charge),
    ]);
}

pub fn charge(cfg: &SimConfig, p: &Protocols, seed: u64) -> Result<Outcome, CliError> {
    let s = &p.charge;
    let mut t = Table::new(&[
        "index", "charge_q", "amplitude_m", "phase_rad", "signed_amplitude_m", "noise_floor_m", "inferred_charge",
    ]);
    match &s.charges {
        Some(q) => {
            let r = charge_step_sequence(q, s.drive_amplitude, s.drive_frequency, s.duration, cfg, seed)?;
            for (i, m) in r.measurements.iter().enumerate() {
                charge_row(&mut t, i, m);
            }
            let mut h = Table::new(&["step_amplitude_m", "count"]);
            for b in &r.histogram {
                h.push(vec![num(b.center), b.count.to_string()]);
            }
            outcome(vec![("charge", t), ("charge_histogram", h)], &r)
        }
        None => {
            let m = charge_measure(s.drive_amplitude, s.drive_frequency, s.duration, cfg, seed)?;
            charge_row(&mut t, 0, &m);
            outcome(vec![("charge", t)], &m)
        }
    }
}

#[derive(Serialize)]
struct PredictRow {
    tau_s: f64,
    sigma_free_m: f64,
    expansion_factor: f64,
    relative_energy: f64,
    #[serde(rename = "energy_J")]
    energy_j: f64,
    max_std_m: f64,
    displacement_m: f64,
    ellipse_angle_rad: f64,
    recompression_time_s: f64,
}

pub fn predict(cfg: &SimConfig, p: &Protocols) -> Result<Outcome, CliError> {
    let s = &p.predict;
    let i = s.axis.index();
    let (w, m, nbar) = (cfg.trap.omega[i], cfg.particle.mass, cfg.initial_nbar[i]);
    let (pv, mv) = thermal_variances(cfg.initial_nbar, &cfg.trap, &cfg.particle)?;
    let e0 = m * w * w * pv[i];
    let sigma0 = pv[i].sqrt();
    let mut rows = Vec::with_capacity(s.taus.len());
    for &tau in &s.taus {
        let sf = free_expansion_variance(nbar, w, m, tau)?.sqrt();
        rows.push(PredictRow {
            tau_s: tau,
            sigma_free_m: sf,
            expansion_factor: sf / sigma0,
            relative_energy: mean_energy_after_release(1.0, 0.0, tau, w, m)?,
            energy_j: mean_energy_after_release(e0, s.force, tau, w, m)?,
            max_std_m: recapture_variance_max(pv[i], mv[i], tau, w, m)?.sqrt(),
            displacement_m: s.force * tau * tau / (2.0 * m),
            ellipse_angle_rad: ellipse_angle(w, tau)?.theta,
            recompression_time_s: recompression_time(tau, w, 1)?,
        });
    }
    let mut t = Table::new(&[
        "tau_s", "sigma_free_m", "expansion_factor", "relative_energy", "energy_J", "max_std_m", "displacement_m",
        "ellipse_angle_rad", "recompression_time_s",
    ]);
    for r in &rows {
        t.push_nums(&[
            r.tau_s,
            r.sigma_free_m,
            r.expansion_factor,
            r.relative_energy,
            r.energy_j,
            r.max_std_m,
            r.displacement_m,
            r.ellipse_angle_rad,
            r.recompression_time_s,
        ]);
    }
    let result = json!({
        "axis": s.axis,
        "omega_rad_s": w,
        "mass_kg": m,
        "nbar": nbar,
        "sigma0_m": sigma0,
        "energy0_J": e0,
        "force_N": s.force,
        "rows": rows,
    });
    outcome(vec![("predict", t)], &result)
}

/// Fits available to `analyze`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FitKind {
    Sine,
    Parabola,
    Gaussian,
    Line,
    Drift,
    TauScaling,
    Psd,
}

pub struct AnalyzeArgs<'a> {
    pub input: &'a Path,
    pub fit: FitKind,
    pub x: Option<&'a str>,
    pub y: Option<&'a str>,
    pub frequency: Option<f64>,
    pub sample_rate: Option<f64>,
    pub segment: usize,
}

fn read_columns(path: &Path, x: Option<&str>, y: Option<&str>) -> Result<(String, String, Vec<f64>, Vec<f64>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    let find = |name: Option<&str>, default: usize| -> Result<usize, CliError> {
        match name {
            Some(n) => headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| CliError::Config(format!("{}: no column named {n}", path.display()))),
            None if default < headers.len() => Ok(default),
            None => Err(CliError::Config(format!("{}: needs at least two columns", path.display()))),
        }
    };
    let (ix, iy) = (find(x, 0)?, find(y, 1)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        let get = |i: usize| -> Result<f64, CliError> {
            rec.get(i).unwrap_or("").trim().parse::<f64>().map_err(|_| {
                CliError::Config(format!("{}: row {}: column {} is not a number", path.display(), line + 2, &headers[i]))
            })
        };
        xs.push(get(ix)?);
        ys.push(get(iy)?);
    }
    Ok((headers[ix].to_string(), headers[iy].to_string(), xs, ys))
}

pub fn analyze(a: &AnalyzeArgs) -> Result<Outcome, CliError> {
    let (xn, yn, x, y) = read_columns(a.input, a.x, a.y)?;
    let model_table = |f: &dyn Fn(f64) -> f64| {
        let mut t = Table::new(&[&xn, &yn, "model"]);
        for (xi, yi) in x.iter().zip(&y) {
            t.push_nums(&[*xi, *yi, f(*xi)]);
        }
        t
    };
    match a.fit {
        FitKind::Sine => {
            let f = a
                .frequency
                .ok_or_else(|| CliError::Usage("--fit sine needs --frequency".into()))?;
            let r = fit_sine(&x, &y, 2.0 * PI * f)?;
            outcome(vec![("analyze", model_table(&|t| r.eval(t)))], &r)
        }
        FitKind::Parabola => {
            let r = fit_parabola(&x, &y)?;
            outcome(vec![("analyze", model_table(&|v| r.eval(v)))], &r)
        }
        FitKind::Gaussian => {
            let r = fit_gaussian(&x, &y)?;
            outcome(vec![("analyze", model_table(&|v| r.eval(v)))], &r)
        }
        FitKind::Line => {
            let r = fit_line(&x, &y, None)?;
            outcome(vec![("analyze", model_table(&|v| r.intercept + r.slope * v))], &r)
        }
        FitKind::Drift => {
            let r = fit_exponential_drift(&x, &y)?;
            outcome(vec![("analyze", model_table(&|t| r.v_final + r.v_amplitude * (-t / r.rc).exp()))], &r)
        }
        FitKind::TauScaling => {
            let r = fit_tau_scaling(&x, &y, None)?;
            outcome(vec![("analyze", model_table(&|t| r.c2 * t * t + r.c4 * t.powi(4)))], &r)
        }
        FitKind::Psd => {
            let fs = match a.sample_rate {
                Some(fs) => fs,
                None if x.len() > 1 => (x.len() - 1) as f64 / (x[x.len() - 1] - x[0]),
                None => return Err(CliError::Usage("--fit psd needs --sample-rate or a time column".into())),
            };
            let psd = psd_welch(&y, fs, a.segment.min(y.len()), 0.5)?;
            let mut t = Table::new(&["frequency_Hz", "psd_per_Hz"]);
            for (f, d) in psd.frequencies.iter().zip(&psd.density) {
                t.push_nums(&[*f, *d]);
            }
            let result = json!({
                "sample_rate_hz": fs,
                "resolution_hz": psd.resolution,
                "total_power": psd.total_power(),
                "column": yn,
            });
            outcome(vec![("psd", t)], &result)
        }
    }
}
