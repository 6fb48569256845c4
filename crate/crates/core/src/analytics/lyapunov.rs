use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::PulseSchedule;
use crate::model::CovarianceState;
use crate::{Error, Result, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentLabel {
    Free,
    Trapped,
}

/// Linear stochastic dynamics `dX = (A X + b) dt + dW`, `<dW dW^T> = D dt`,
/// held for `duration`, over `X = (x, y, z, p_x, p_y, p_z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentModel {
    pub a: Matrix6<f64>,
    pub d: Matrix6<f64>,
    /// Constant force entering `dp/dt` (N). Affects only the mean.
    pub force: Vector3<f64>,
    pub duration: f64,
    pub label: SegmentLabel,
}

impl SegmentModel {
    pub fn new(a: Matrix6<f64>, d: Matrix6<f64>, duration: f64, label: SegmentLabel) -> Result<Self> {
        if !(duration >= 0.0) || !duration.is_finite() {
            return Err(Error::domain("segment duration must be >= 0"));
        }
        let inv_m = a[(0, 3)];
        if !(inv_m > 0.0) {
            return Err(Error::domain("segment drift must contain dr/dt = p/m"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { inv_m } else { 0.0 };
                if a[(i, j)] != 0.0 || a[(i, j + 3)] != want {
                    return Err(Error::domain("segment drift must contain dr/dt = p/m"));
                }
            }
        }
        CovarianceState::new(d).map_err(|_| Error::domain("diffusion matrix must be symmetric PSD"))?;
        Ok(Self { a, d, force: Vector3::zeros(), duration, label })
    }

    /// Axis-wise oscillator with stiffness `m Omega_i^2 * envelope`.
    pub fn trapped(
        mass: f64,
        omega: [f64; 3],
        envelope: f64,
        gamma: f64,
        diffusion: [f64; 3],
        duration: f64,
    ) -> Result<Self> {
        let mut a = Matrix6::zeros();
        let mut d = Matrix6::zeros();
        for i in 0..3 {
            a[(i, i + 3)] = 1.0 / mass;
            a[(i + 3, i)] = -mass * omega[i] * omega[i] * envelope;
            a[(i + 3, i + 3)] = -gamma;
            d[(i + 3, i + 3)] = diffusion[i];
        }
        let label = if envelope > 0.0 { SegmentLabel::Trapped } else { SegmentLabel::Free };
        Self::new(a, d, duration, label)
    }

    pub fn free(mass: f64, gamma: f64, diffusion: [f64; 3], duration: f64) -> Result<Self> {
        Self::trapped(mass, [0.0; 3], 0.0, gamma, diffusion, duration)
    }

    pub fn with_force(mut self, force: Vector3<f64>) -> Self {
        self.force = force;
        self
    }

    fn mass(&self) -> f64 {
        1.0 / self.a[(0, 3)]
    }

    /// Frequency scale used to make the drift dimensionless.
    fn rate_scale(&self) -> f64 {
        let m = self.mass();
        let mut s: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s = s.max((self.a[(i + 3, j)].abs() / m).sqrt());
                s = s.max(self.a[(i + 3, j + 3)].abs());
            }
        }
        if s == 0.0 && self.duration > 0.0 {
            s = 1.0 / self.duration;
        }
        s.max(1.0)
    }
}

/// Diagonal rescaling `p -> p / (m w)`.
fn scaling(mass: f64, w: f64) -> Vector6<f64> {
    let s = 1.0 / (mass * w);
    Vector6::new(1.0, 1.0, 1.0, s, s, s)
}

fn scale_sym(m: &Matrix6<f64>, t: &Vector6<f64>) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| m[(i, j)] * t[i] * t[j])
}

fn unscale_sym(m: &Matrix6<f64>, t: &Vector6<f64>) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| m[(i, j)] / (t[i] * t[j]))
}

fn scaled_drift(a: &Matrix6<f64>, t: &Vector6<f64>) -> Matrix6<f64> {
    Matrix6::from_fn(|i, j| a[(i, j)] * t[i] / t[j])
}

fn lyap_rhs(a: &Matrix6<f64>, d: &Matrix6<f64>, s: &Matrix6<f64>) -> Matrix6<f64> {
    let as_ = a * s;
    as_ + as_.transpose() + d
}

fn symmetrize(s: &mut Matrix6<f64>) {
    *s = (*s + s.transpose()) * 0.5;
}

/// Propagates a covariance through segments of `dSigma/dt = A Sigma + Sigma A^T + D`.
///
/// The deterministic flow `Phi Sigma Phi^T` is exact; the noise contribution
/// is integrated with a fixed-step fourth-order scheme with at least 50
/// steps per oscillation radian.
pub fn lyapunov_propagate(sigma0: &CovarianceState, segments: &[SegmentModel]) -> Result<CovarianceState> {
    sigma0.check()?;
    let mut sigma = sigma0.sigma;
    for (k, seg) in segments.iter().enumerate() {
        if seg.duration == 0.0 {
            continue;
        }
        let w = seg.rate_scale();
        let t = scaling(seg.mass(), w);
        let a = scaled_drift(&seg.a, &t);
        let d = scale_sym(&seg.d, &t);
        let mut s = scale_sym(&sigma, &t);
        let phi = (a * seg.duration).exp();
        s = phi * s * phi.transpose();
        if d.iter().any(|v| *v != 0.0) {
            // Noise contribution Q with Q(0) = 0, dQ/dt = A Q + Q A^T + D.
            let n = ((seg.duration * w * 50.0).ceil() as usize).max(1);
            let h = seg.duration / n as f64;
            let mut q = Matrix6::zeros();
            for _ in 0..n {
                let k1 = lyap_rhs(&a, &d, &q);
                let k2 = lyap_rhs(&a, &d, &(q + k1 * (h / 2.0)));
                let k3 = lyap_rhs(&a, &d, &(q + k2 * (h / 2.0)));
                let k4 = lyap_rhs(&a, &d, &(q + k3 * h));
                q += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            s += q;
        }
        symmetrize(&mut s);
        sigma = unscale_sym(&s, &t);
        symmetrize(&mut sigma);
        CovarianceState { sigma }
            .check()
            .map_err(|e| Error::Numerical(format!("segment {k}: {e}")))?;
    }
    Ok(CovarianceState { sigma })
}

/// Propagates the mean phase-space point, including constant forces.
pub fn propagate_mean(mean0: &Vector6<f64>, segments: &[SegmentModel]) -> Vector6<f64> {
    let mut mu = *mean0;
    for seg in segments {
        if seg.duration == 0.0 {
            continue;
        }
        let t = scaling(seg.mass(), seg.rate_scale());
        let a = scaled_drift(&seg.a, &t);
        let mut aug = SMatrix::<f64, 7, 7>::zeros();
        aug.fixed_view_mut::<6, 6>(0, 0).copy_from(&a);
        for i in 0..3 {
            aug[(i + 3, 6)] = seg.force[i] * t[i + 3];
        }
        let phi = (aug * seg.duration).exp();
        let mut x = nalgebra::SVector::<f64, 7>::zeros();
        for i in 0..6 {
            x[i] = mu[i] * t[i];
        }
        x[6] = 1.0;
        let y = phi * x;
        mu = Vector6::from_fn(|i, _| y[i] / t[i]);
    }
    mu
}

/// Linear model of a schedule under a configuration.
///
/// Trap ramps are cut into `ramp_pieces` sub-segments at their mid-point
/// envelope. With `with_feedback`, enabled loops act as ideal velocity
/// damping routed through the electrode cross-talk; detector noise and loop
/// latency are not modelled.
pub fn segments_from_schedule(
    schedule: &PulseSchedule,
    cfg: &SimConfig,
    with_feedback: bool,
    ramp_pieces: usize,
) -> Result<Vec<SegmentModel>> {
    schedule.validate()?;
    let tl = schedule.timeline(cfg.dc());
    let end = schedule.total_duration;
    let mut cuts = vec![0.0, end];
    cuts.extend(tl.envelope_breakpoints());
    cuts.extend(tl.dc_switches());
    if with_feedback {
        cuts.extend(tl.feedback_switches());
    }
    cuts.retain(|t| *t >= 0.0 && *t <= end);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let m = cfg.particle.mass;
    let env = &cfg.environment;
    let c = cfg.electrodes.transduction;
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 <= 0.0 {
            continue;
        }
        let e0 = tl.envelope_at(t0);
        let e1 = tl.envelope_at(t1);
        let emid = tl.envelope_at(0.5 * (t0 + t1));
        let pieces = if e0 == e1 && e0 == emid { 1 } else { ramp_pieces.max(1) };
        let h = (t1 - t0) / pieces as f64;
        for k in 0..pieces {
            let tm = t0 + (k as f64 + 0.5) * h;
            let e = tl.envelope_at(tm);
            let mut seg = SegmentModel::trapped(m, cfg.trap.omega, e, env.gamma, env.diffusion(m, e), h)?;
            if with_feedback && tl.feedback_at(tm) {
                add_feedback(&mut seg.a, cfg, &c);
            }
            seg.force = cfg.static_force(&tl.dc_at(tm));
            out.push(seg);
        }
    }
    Ok(out)
}

fn add_feedback(a: &mut Matrix6<f64>, cfg: &SimConfig, c: &Matrix3<f64>) {
    for (i, fb) in cfg.feedback.axes.iter().enumerate() {
        let c_ii = c[(i, i)];
        if !fb.enabled || fb.gain == 0.0 || c_ii == 0.0 {
            continue;
        }
        let sign = if fb.inverted { -1.0 } else { 1.0 };
        let j = fb.routing_electrode.index();
        for k in 0..3 {
            a[(k + 3, i + 3)] -= sign * fb.gain * c[(k, j)] / c_ii;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{free_expansion_variance, recapture_variance_max, recompression_time};
    use crate::dynamics::{thermal_variances, Action, FeedbackConfig};
    use crate::model::Environment;
    use std::f64::consts::PI;

    fn m() -> f64 {
        SimConfig::reference().particle.mass
    }
    const W: [f64; 3] = [2.0 * PI * 302e3, 2.0 * PI * 268e3, 2.0 * PI * 92e3];

    fn thermal(nbar: f64) -> CovarianceState {
        let c = SimConfig::reference();
        let (p, q) = thermal_variances([nbar; 3], &c.trap, &c.particle).unwrap();
        CovarianceState::diagonal(p, q).unwrap()
    }

    #[test]
    fn zero_dynamics_keeps_sigma() {
        let s0 = thermal(3.0);
        let mut seg = SegmentModel::free(m(), 0.0, [0.0; 3], 1e-3).unwrap();
        seg.a = Matrix6::zeros();
        seg.a[(0, 3)] = 1.0 / m();
        seg.a[(1, 4)] = 1.0 / m();
        seg.a[(2, 5)] = 1.0 / m();
        let s = lyapunov_propagate(&s0, &[]).unwrap();
        assert_eq!(s, s0);
        let s = lyapunov_propagate(&s0, &[SegmentModel { duration: 0.0, ..seg }]).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn free_segment_matches_closed_form() {
        let s0 = thermal(117.0);
        for tau in [1e-6, 20e-6, 100e-6] {
            let s = lyapunov_propagate(&s0, &[SegmentModel::free(m(), 0.0, [0.0; 3], tau).unwrap()]).unwrap();
            let want = free_expansion_variance(117.0, W[2], m(), tau).unwrap();
            assert!((s.sigma[(2, 2)] / want - 1.0).abs() < 1e-10);
            // Same thing through the stochastic branch with negligible noise.
            let s = lyapunov_propagate(&s0, &[SegmentModel::free(m(), 0.0, [1e-60; 3], tau).unwrap()]).unwrap();
            assert!((s.sigma[(2, 2)] / want - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn trapped_segment_conserves_block_determinants() {
        let mut s0 = thermal(20.0);
        s0 = lyapunov_propagate(&s0, &[SegmentModel::free(m(), 0.0, [0.0; 3], 13e-6).unwrap()]).unwrap();
        let det = |s: &CovarianceState, i: usize| {
            let b = s.axis_block(i);
            b[0][0] * b[1][1] - b[0][1] * b[1][0]
        };
        for noisy in [false, true] {
            let d = if noisy { [1e-70; 3] } else { [0.0; 3] };
            let seg = SegmentModel::trapped(m(), W, 1.0, 0.0, d, 37.3e-6).unwrap();
            let s = lyapunov_propagate(&s0, &[seg]).unwrap();
            for i in 0..3 {
                assert!((det(&s, i) / det(&s0, i) - 1.0).abs() < 1e-9, "{noisy} {i}");
            }
        }
    }

    #[test]
    fn recapture_maximum_matches_closed_form() {
        let s0 = thermal(117.0);
        let (sz, sp) = (s0.sigma[(2, 2)], s0.sigma[(5, 5)]);
        for tau in [5e-6, 40e-6, 100e-6] {
            let free = SegmentModel::free(m(), 0.0, [0.0; 3], tau).unwrap();
            let s1 = lyapunov_propagate(&s0, &[free]).unwrap();
            let period = 2.0 * PI / W[2];
            let n = 4000;
            let step = SegmentModel::trapped(m(), W, 1.0, 0.0, [0.0; 3], period / n as f64).unwrap();
            let mut s = s1;
            let mut best: f64 = s.sigma[(2, 2)];
            let mut best_k = 0;
            for k in 1..=n {
                s = lyapunov_propagate(&s, std::slice::from_ref(&step)).unwrap();
                if s.sigma[(2, 2)] > best {
                    best = s.sigma[(2, 2)];
                    best_k = k;
                }
            }
            // Refine around the grid maximum with a parabola through three points.
            let at = |t: f64| {
                let seg = SegmentModel::trapped(m(), W, 1.0, 0.0, [0.0; 3], t).unwrap();
                lyapunov_propagate(&s1, &[seg]).unwrap().sigma[(2, 2)]
            };
            let h = period / n as f64;
            let t = best_k as f64 * h;
            let (a, b, c) = (at(t - h), at(t), at(t + h));
            let refined = b + (a - c).powi(2) / (8.0 * (2.0 * b - a - c));
            let want = recapture_variance_max(sz, sp, tau, W[2], m()).unwrap();
            assert!((refined / want - 1.0).abs() < 1e-6, "{tau}: {}", refined / want - 1.0);
        }
    }

    #[test]
    fn recompression_restores_initial_width() {
        let s0 = thermal(117.0);
        let tau = 5e-6;
        let tp = recompression_time(tau, W[2], 1).unwrap();
        let segs = [
            SegmentModel::free(m(), 0.0, [0.0; 3], tau).unwrap(),
            SegmentModel::trapped(m(), W, 1.0, 0.0, [0.0; 3], tp).unwrap(),
            SegmentModel::free(m(), 0.0, [0.0; 3], tau).unwrap(),
        ];
        let s = lyapunov_propagate(&s0, &segs).unwrap();
        assert!((s.sigma[(2, 2)].sqrt() / s0.sigma[(2, 2)].sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn schedule_segments_cover_duration_and_ramps() {
        let c = SimConfig::reference();
        let s = crate::dynamics::PulseSchedule::steady(30e-6)
            .with_event(5e-6, Action::TrapOff)
            .with_event(15e-6, Action::TrapOn);
        let segs = segments_from_schedule(&s, &c, false, 8).unwrap();
        let total: f64 = segs.iter().map(|s| s.duration).sum();
        assert!((total - 30e-6).abs() < 1e-15);
        assert_eq!(segs.len(), 3 + 2 * 8);
        assert!(segs.iter().any(|s| s.label == SegmentLabel::Free));
    }

    #[test]
    fn feedback_damping_routes_through_cross_talk() {
        let mut c = SimConfig::reference();
        c.environment = Environment::vacuum();
        c.feedback = FeedbackConfig::off();
        c.feedback.axes[2].enabled = true;
        c.feedback.axes[2].gain = 1e3;
        let segs = segments_from_schedule(&crate::dynamics::PulseSchedule::steady(1e-6), &c, true, 4).unwrap();
        let a = segs[0].a;
        assert!((a[(5, 5)] + 1e3).abs() < 1e-9);
        let cm = c.electrodes.transduction;
        assert!((a[(3, 5)] + 1e3 * cm[(0, 2)] / cm[(2, 2)]).abs() < 1e-9);
    }

    #[test]
    fn mean_follows_constant_force() {
        let f = Vector3::new(0.0, 0.0, 2e-18);
        let seg = SegmentModel::free(m(), 0.0, [0.0; 3], 100e-6).unwrap().with_force(f);
        let mu = propagate_mean(&Vector6::zeros(), &[seg]);
        assert!((mu[2] / (2e-18 * 1e-8 / (2.0 * m())) - 1.0).abs() < 1e-9);
        let seg = SegmentModel::trapped(m(), W, 1.0, 0.0, [0.0; 3], 1.0e-3).unwrap();
        let mu0 = Vector6::new(1e-9, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mu = propagate_mean(&mu0, &[seg]);
        let want = 1e-9 * (W[0] * 1e-3).cos();
        assert!((mu[0] - want).abs() < 1e-9 * 1e-8);
    }
}
