use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{integrate_band, psd_welch};
use crate::consts::{HBAR, KB};
use crate::dynamics::{AxisFeedback, FeedbackConfig, PulseSchedule, RunOptions, Simulator};
use crate::model::{epstein_damping, normalized_inverse, Axis};
use crate::rng::stream;
use crate::{Error, Result, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossCoolOptions {
    /// Gas pressure during calibration (mbar); high enough that gas damping
    /// sets a well-defined open-loop temperature.
    pub pressure_mbar: f64,
    /// Damping of the reference loop; `None` uses the gas damping rate.
    pub reference_gain: Option<f64>,
    /// Discarded start of each run (s).
    pub settle: f64,
    /// Averaging time after settling (s).
    pub duration: f64,
    pub dt: f64,
    pub sample_rate: f64,
    /// Half-width of the band around each mode used for its variance (Hz).
    pub band_half_width: f64,
    /// Required match of the steady variance.
    pub tolerance: f64,
    /// Match actually iterated to, in `ln` variance.
    pub search_tolerance: f64,
    pub max_iterations: usize,
    /// Gains are searched within this factor of the reference gain.
    pub max_gain_factor: f64,
}

impl Default for CrossCoolOptions {
    fn default() -> Self {
        Self {
            pressure_mbar: 7e-2,
            reference_gain: None,
            settle: 5e-3,
            duration: 30e-3,
            dt: 20e-9,
            sample_rate: 5e6,
            band_half_width: 10e3,
            tolerance: 0.02,
            search_tolerance: 2e-3,
            max_iterations: 30,
            max_gain_factor: 1e4,
        }
    }
}

/// Outcome of the gain search for mode `mode` cooled through `electrode`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSearch {
    pub mode: Axis,
    pub electrode: Axis,
    /// Signed gain that reproduces the reference variance; zero when the
    /// electrode does not reach the mode.
    pub gain: f64,
    /// `reference_gain / gain`, the estimate of `C_ij / C_ii`.
    pub ratio: f64,
    pub ratio_uncertainty: f64,
    /// Final mismatch in `ln` variance.
    pub residual: f64,
    pub iterations: usize,
    pub bracketed: bool,
    pub sign_flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTalkEstimate {
    pub normalized_inverse_hat: Matrix3<f64>,
    /// One-sigma uncertainty of each entry (zero on the diagonal).
    pub uncertainty: Matrix3<f64>,
    /// Estimated `C_ij / C_ii`.
    pub ratios: Matrix3<f64>,
    pub reference_gain: f64,
    pub reference_variance: [f64; 3],
    pub searches: Vec<GainSearch>,
}

fn calibration_config(cfg: &SimConfig, o: &CrossCoolOptions) -> Result<SimConfig> {
    let mut c = cfg.clone();
    let t = c.environment.gas_temperature;
    c.environment.pressure_mbar = Some(o.pressure_mbar);
    c.environment.gamma = epstein_damping(o.pressure_mbar, t, c.particle.diameter, c.particle.density)?;
    c.integration.dt = o.dt;
    c.detectors.sample_rate = o.sample_rate;
    c.feedback = FeedbackConfig::off();
    c.initial_nbar = c.trap.omega.map(|w| KB * t / (HBAR * w));
    c.validate()?;
    Ok(c)
}

struct Probe<'a> {
    cfg: &'a SimConfig,
    o: &'a CrossCoolOptions,
    seed: u64,
    schedule: PulseSchedule,
}

impl Probe<'_> {
    /// Narrow-band variance of channel `mode` with that mode cooled through
    /// `electrode` at signed `gain`. Every call for the same mode uses the
    /// same random stream.
    fn variance(&self, mode: Axis, electrode: Axis, gain: f64) -> Result<f64> {
        let i = mode.index();
        let mut c = self.cfg.clone();
        c.feedback.axes[i] = AxisFeedback {
            routing_electrode: electrode,
            inverted: gain < 0.0,
            ..AxisFeedback::new(mode, gain.abs())
        };
        let sim = Simulator::new(&c, &self.schedule)?;
        let opts = RunOptions { record_states: false, record_start: self.o.settle, ..Default::default() };
        let tr = sim.run(&mut stream(self.seed, &format!("crosscool/{mode}"), 0), &opts)?;
        if tr.lost {
            return Ok(f64::INFINITY);
        }
        let x = &tr.detector_channels[i];
        let seg = 1usize << 13;
        let psd = psd_welch(x, c.detectors.sample_rate, seg.min(x.len()), 0.5)?;
        let f = c.trap.omega[i] / (2.0 * std::f64::consts::PI);
        integrate_band(&psd, f - self.o.band_half_width, f + self.o.band_half_width)
    }
}

/// Mismatch assigned to a run that lost the particle.
const LOST: f64 = 50.0;

/// Finds the gain through `electrode` that gives mode `mode` the reference
/// variance, on a logarithmic gain axis.
fn search(p: &Probe, mode: Axis, electrode: Axis, g_ref: f64, ln_ref: f64) -> Result<GainSearch> {
    let o = p.o;
    let count = std::cell::Cell::new(0usize);
    let eval = |sign: f64, x: f64| -> Result<f64> {
        count.set(count.get() + 1);
        let v = p.variance(mode, electrode, sign * x.exp())?;
        Ok(if v.is_finite() && v > 0.0 { v.ln() - ln_ref } else { LOST })
    };
    let lim = o.max_gain_factor.ln();
    let mut x0 = g_ref.ln();
    let mut fp = eval(1.0, x0)?;
    let mut fm = eval(-1.0, x0)?;
    // Both signs unstable: the electrode couples strongly, start lower.
    while fp >= LOST && fm >= LOST && x0 - 10f64.ln() >= g_ref.ln() - lim {
        x0 -= 10f64.ln();
        fp = eval(1.0, x0)?;
        fm = eval(-1.0, x0)?;
    }
    let (sign, mut fa) = if fm < fp { (-1.0, fm) } else { (1.0, fp) };
    let sign_flipped = sign < 0.0;
    let mut xa = x0;
    // f decreases with gain for the damping sign; walk by decades.
    let step = if fa > 0.0 { 10f64.ln() } else { -(10f64.ln()) };
    let (mut xb, mut fb) = (xa, fa);
    let mut bracketed = fa.abs() <= o.search_tolerance;
    while !bracketed && (xb + step - g_ref.ln()).abs() <= lim + 1e-9 && count.get() < o.max_iterations {
        xa = xb;
        fa = fb;
        xb += step;
        fb = eval(sign, xb)?;
        bracketed = fa.signum() != fb.signum() || fb.abs() <= o.search_tolerance;
    }
    if !bracketed {
        return Ok(GainSearch {
            mode,
            electrode,
            gain: 0.0,
            ratio: 0.0,
            ratio_uncertainty: g_ref / (g_ref * o.max_gain_factor),
            residual: fb,
            iterations: count.get(),
            bracketed: false,
            sign_flipped,
        });
    }
    // Illinois false position.
    let (mut x, mut fx) = if fb.abs() < fa.abs() { (xb, fb) } else { (xa, fa) };
    let mut side = 0i8;
    while fx.abs() > o.search_tolerance && count.get() < o.max_iterations {
        let xn = if (fb - fa).abs() > 0.0 { xb - fb * (xb - xa) / (fb - fa) } else { 0.5 * (xa + xb) };
        let fnew = eval(sign, xn)?;
        if fnew.signum() == fb.signum() {
            xb = xn;
            fb = fnew;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            xa = xn;
            fa = fnew;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
        x = xn;
        fx = fnew;
    }
    let slope = if (xb - xa).abs() > 0.0 { ((fb - fa) / (xb - xa)).abs() } else { 1.0 };
    let g = sign * x.exp();
    let ratio = g_ref / g;
    Ok(GainSearch {
        mode,
        electrode,
        gain: g,
        ratio,
        ratio_uncertainty: ratio.abs() * (fx.abs().max(f64::EPSILON) / slope.max(1e-3)),
        residual: fx,
        iterations: count.get(),
        bracketed: true,
        sign_flipped,
    })
}

/// Cross-cooling calibration of the normalised inverse transduction.
///
/// Each mode is first cooled through its own electrode at the reference
/// gain; then the loop is rerouted through each other electrode and its gain
/// adjusted until the mode's steady variance matches. Equal variance means
/// equal damping, so the gain ratio is `C_ij / C_ii`.
pub fn cross_cool_calibrate(cfg: &SimConfig, seed: u64, o: &CrossCoolOptions) -> Result<CrossTalkEstimate> {
    if !(o.settle >= 0.0) || !(o.duration > 0.0) || o.max_iterations < 3 || !(o.max_gain_factor > 10.0) {
        return Err(Error::domain("invalid cross-cooling options"));
    }
    let c = calibration_config(cfg, o)?;
    let g_ref = o.reference_gain.unwrap_or(c.environment.gamma);
    if !(g_ref > 0.0) {
        return Err(Error::domain("reference gain must be > 0"));
    }
    let p = Probe { cfg: &c, o, seed, schedule: PulseSchedule::steady(o.settle + o.duration) };
    let refs: Vec<f64> = Axis::ALL
        .par_iter()
        .map(|&a| p.variance(a, a, g_ref))
        .collect::<Result<_>>()?;
    if refs.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Numerical("reference cooling run failed".into()));
    }
    let pairs: Vec<(Axis, Axis)> = Axis::ALL
        .iter()
        .flat_map(|&i| Axis::ALL.iter().filter(move |&&j| j != i).map(move |&j| (i, j)))
        .collect();
    let searches: Vec<GainSearch> = pairs
        .par_iter()
        .map(|&(i, j)| search(&p, i, j, g_ref, refs[i.index()].ln()))
        .collect::<Result<_>>()?;

    let mut r = Matrix3::identity();
    for s in &searches {
        r[(s.mode.index(), s.electrode.index())] = s.ratio;
    }
    let n = normalized_inverse(&r)?;
    // Linear propagation of the ratio uncertainties.
    let mut var = Matrix3::zeros();
    for s in &searches {
        let (a, b) = (s.mode.index(), s.electrode.index());
        let h = s.ratio_uncertainty.max(1e-9 * s.ratio.abs().max(1e-9));
        let mut rp = r;
        rp[(a, b)] += h;
        let d = (normalized_inverse(&rp)? - n) / h * s.ratio_uncertainty;
        var += d.component_mul(&d);
    }
    Ok(CrossTalkEstimate {
        normalized_inverse_hat: n,
        uncertainty: var.map(f64::sqrt),
        ratios: r,
        reference_gain: g_ref,
        reference_variance: [refs[0], refs[1], refs[2]],
        searches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> CrossCoolOptions {
        CrossCoolOptions { settle: 2e-3, duration: 8e-3, ..Default::default() }
    }

    #[test]
    fn diagonal_electrodes_give_identity() {
        let mut c = SimConfig::reference();
        c.electrodes = crate::ElectrodeSystem::diagonal(crate::config::REFERENCE_CNV, &c.particle).unwrap();
        let est = cross_cool_calibrate(&c, 1, &fast()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((est.normalized_inverse_hat[(i, j)] - want).abs() < 1e-3, "{est:?}");
            }
        }
    }

    #[test]
    fn reference_matrix_is_recovered() {
        let c = SimConfig::reference();
        let truth = c.electrodes.normalized_inverse().unwrap();
        let est = cross_cool_calibrate(&c, 2, &fast()).unwrap();
        for i in 0..3 {
            assert_eq!(est.normalized_inverse_hat[(i, i)], 1.0);
            for j in 0..3 {
                let (e, t) = (est.normalized_inverse_hat[(i, j)], truth[(i, j)]);
                assert!((e - t).abs() <= 0.1 * t.abs(), "({i},{j}) {e} vs {t}");
            }
        }
        let r = est.ratios;
        let ct = c.electrodes.transduction;
        for s in &est.searches {
            let (i, j) = (s.mode.index(), s.electrode.index());
            assert!((r[(i, j)] / (ct[(i, j)] / ct[(i, i)]) - 1.0).abs() < 0.02, "{s:?}");
        }
    }
}
