use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::linalg::lstsq;
use crate::{Error, Result};

pub(crate) fn t95(dof: usize) -> f64 {
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64).map_or(f64::INFINITY, |d| d.inverse_cdf(0.975))
}

fn check_xy(x: &[f64], y: &[f64], min: usize, what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::domain(format!("{what}: x and y differ in length")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::domain(format!("{what}: non-finite input")));
    }
    let mut xs: Vec<f64> = x.to_vec();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < min {
        return Err(Error::InsufficientData(format!("{what}: needs at least {min} distinct abscissae")));
    }
    Ok(())
}

/// `a (V - v_opt)^2 + b` with 95% confidence half-widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolaFit {
    pub a: f64,
    pub v_opt: f64,
    pub b: f64,
    pub a_ci: f64,
    pub v_opt_ci: f64,
    pub b_ci: f64,
    /// `a > 0`; otherwise `v_opt` is a maximum and meaningless as an optimum.
    pub has_minimum: bool,
    pub v_opt_in_range: bool,
    pub rss: f64,
    pub dof: usize,
}

impl ParabolaFit {
    pub fn eval(&self, v: f64) -> f64 {
        self.a * (v - self.v_opt).powi(2) + self.b
    }
}

pub fn fit_parabola(voltages: &[f64], energies: &[f64]) -> Result<ParabolaFit> {
    fit_parabola_weighted(voltages, energies, None)
}

/// Quadratic least squares, reparameterised to vertex form. Confidence
/// intervals propagate the regression covariance to `(a, v_opt, b)`.
pub fn fit_parabola_weighted(voltages: &[f64], energies: &[f64], weights: Option<&[f64]>) -> Result<ParabolaFit> {
    check_xy(voltages, energies, 4, "parabola fit")?;
    let n = voltages.len();
    let vbar = voltages.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, 3, |i, j| (voltages[i] - vbar).powi(j as i32));
    let y = DVector::from_column_slice(energies);
    let ls = lstsq(&x, &y, weights)?;
    let (c0, c1, c2) = (ls.coef[0], ls.coef[1], ls.coef[2]);
    let cov = Matrix3::from_fn(|i, j| ls.cov_unscaled[(i, j)]) * ls.sigma2();
    let v_opt = vbar - c1 / (2.0 * c2);
    let b = c0 - c1 * c1 / (4.0 * c2);
    let half = |g: Vector3<f64>| (g.transpose() * cov * g)[(0, 0)].max(0.0).sqrt() * t95(ls.dof);
    let (lo, hi) = voltages
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    Ok(ParabolaFit {
        a: c2,
        v_opt,
        b,
        a_ci: half(Vector3::new(0.0, 0.0, 1.0)),
        v_opt_ci: half(Vector3::new(0.0, -1.0 / (2.0 * c2), c1 / (2.0 * c2 * c2))),
        b_ci: half(Vector3::new(1.0, -c1 / (2.0 * c2), c1 * c1 / (4.0 * c2 * c2))),
        has_minimum: c2 > 0.0,
        v_opt_in_range: v_opt >= lo && v_opt <= hi,
        rss: ls.rss,
        dof: ls.dof,
    })
}

/// `offset + amplitude exp(-(V - center)^2 / (2 width^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
    pub offset: f64,
    pub rss: f64,
    pub converged: bool,
}

impl GaussianFit {
    pub fn eval(&self, v: f64) -> f64 {
        self.offset + self.amplitude * (-(v - self.center).powi(2) / (2.0 * self.width * self.width)).exp()
    }
}

fn gauss_rss(p: &[f64; 4], x: &[f64], y: &[f64]) -> f64 {
    let w = p[2].exp();
    x.iter()
        .zip(y)
        .map(|(xi, yi)| {
            let m = p[3] + p[0] * (-(xi - p[1]).powi(2) / (2.0 * w * w)).exp();
            (yi - m).powi(2)
        })
        .sum()
}

/// Levenberg-Marquardt fit of a Gaussian, started from the vertex form of
/// the parabola fit. A scan curve that flattens at large detuning is an
/// inverted Gaussian (`amplitude < 0`).
pub fn fit_gaussian(voltages: &[f64], energies: &[f64]) -> Result<GaussianFit> {
    check_xy(voltages, energies, 5, "gaussian fit")?;
    let ys = energies.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ys = if ys > 0.0 { ys } else { 1.0 };
    let y: Vec<f64> = energies.iter().map(|v| v / ys).collect();
    let (lo, hi) = voltages
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let range = hi - lo;
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut p = match fit_parabola(voltages, &y) {
        Ok(pf) if pf.has_minimum => {
            let c = pf.v_opt.clamp(lo, hi);
            // Width such that the Gaussian rises to the observed maximum.
            let w = range / 2.0;
            let amp = -2.0 * pf.a * w * w;
            [amp, c, w.ln(), pf.b - amp]
        }
        _ => {
            let imin = y.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            [ymin - ymax, voltages[imin], (range / 4.0).ln(), ymax]
        }
    };
    let mut rss = gauss_rss(&p, voltages, &y);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let w = p[2].exp();
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jtr = nalgebra::Vector4::<f64>::zeros();
        for (xi, yi) in voltages.iter().zip(&y) {
            let d = xi - p[1];
            let g = (-(d * d) / (2.0 * w * w)).exp();
            let m = p[3] + p[0] * g;
            let row = nalgebra::Vector4::new(g, p[0] * g * d / (w * w), p[0] * g * d * d / (w * w), 1.0);
            jtj += row * row.transpose();
            jtr += row * (yi - m);
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-30);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
            let r = gauss_rss(&cand, voltages, &y);
            if r.is_finite() && r <= rss {
                let rel = (rss - r) / rss.max(f64::MIN_POSITIVE);
                let small = step.iter().zip(&cand).all(|(s, c)| s.abs() <= 1e-12 * c.abs().max(1e-12));
                p = cand;
                rss = r;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-14 || small || rss == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // No downhill step at any damping: stationary point.
            converged = lambda > 1e10 || rss == 0.0;
            break;
        }
        if converged {
            break;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        converged = false;
    }
    Ok(GaussianFit {
        amplitude: p[0] * ys,
        center: p[1],
        width: p[2].exp(),
        offset: p[3] * ys,
        rss: rss * ys * ys,
        converged,
    })
}

/// `v_final + v_amplitude exp(-t / rc)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    pub v_final: f64,
    pub v_amplitude: f64,
    pub rc: f64,
    pub rss: f64,
    /// False when the time constant ended on the edge of its search range.
    pub converged: bool,
}

fn drift_linear(t: &[f64], y: &[f64], rc: f64) -> Option<(f64, f64, f64)> {
    let n = t.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (-t[i] / rc).exp() });
    let ls = lstsq(&x, &DVector::from_column_slice(y), None).ok()?;
    Some((ls.coef[0], ls.coef[1], ls.rss))
}

/// Exponential settling fit. For fixed `rc` the model is linear, so `ln rc`
/// is searched on a grid, refined by golden section and polished with
/// Gauss-Newton on all three parameters.
pub fn fit_exponential_drift(times: &[f64], values: &[f64]) -> Result<DriftFit> {
    check_xy(times, values, 4, "drift fit")?;
    let (t0, t1) = times
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let span = t1 - t0;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.iter().all(|v| (v - mean).abs() <= 1e-300) {
        return Ok(DriftFit { v_final: mean, v_amplitude: 0.0, rc: span, rss: 0.0, converged: true });
    }
    let lo = (span / 1e3).ln();
    let hi = (span * 1e3).ln();
    let f = |l: f64| drift_linear(times, values, l.exp()).map_or(f64::INFINITY, |r| r.2);
    let n = 240;
    let grid: Vec<f64> = (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|l| f(*l)).collect();
    let best = vals.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-12 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let mut rc = (0.5 * (a + b)).exp();
    let (mut vf, mut v0, mut rss) =
        drift_linear(times, values, rc).ok_or_else(|| Error::Singular("drift design".into()))?;
    for _ in 0..20 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (t, y) in times.iter().zip(values) {
            let e = (-t / rc).exp();
            let row = Vector3::new(1.0, e, v0 * e * t / (rc * rc) * rc);
            jtj += row * row.transpose();
            jtr += row * (y - vf - v0 * e);
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        let rc_new = rc * (1.0 + step[2]).max(0.5).min(2.0);
        let Some((a1, b1, r1)) = drift_linear(times, values, rc_new) else { break };
        if !(r1 < rss) {
            break;
        }
        let done = (rc_new / rc - 1.0).abs() < 1e-14;
        rc = rc_new;
        vf = a1;
        v0 = b1;
        rss = r1;
        if done {
            break;
        }
    }
    let converged = best != 0 && best != n;
    Ok(DriftFit { v_final: vf, v_amplitude: v0, rc, rss, converged })
}

/// `c2 tau^2 + c4 tau^4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauScalingFit {
    pub c2: f64,
    pub c4: f64,
    pub c2_se: f64,
    pub c4_se: f64,
}

impl TauScalingFit {
    pub fn ratio(&self) -> f64 {
        self.c4 / self.c2
    }
}

/// Linear least squares in `{tau^2, tau^4}`; optional weights are inverse
/// variances of the scales.
pub fn fit_tau_scaling(taus: &[f64], scales: &[f64], weights: Option<&[f64]>) -> Result<TauScalingFit> {
    check_xy(taus, scales, 3, "tau scaling fit")?;
    let n = taus.len();
    let x = DMatrix::from_fn(n, 2, |i, j| taus[i].powi(2 * (j as i32 + 1)));
    let ls = lstsq(&x, &DVector::from_column_slice(scales), weights)?;
    let s2 = ls.sigma2();
    Ok(TauScalingFit {
        c2: ls.coef[0],
        c4: ls.coef[1],
        c2_se: (ls.cov_unscaled[(0, 0)] * s2).sqrt(),
        c4_se: (ls.cov_unscaled[(1, 1)] * s2).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    /// 95% two-sided half-width of the slope.
    pub slope_ci: f64,
    pub dof: usize,
}

pub fn fit_line(x: &[f64], y: &[f64], weights: Option<&[f64]>) -> Result<LineFit> {
    check_xy(x, y, 2, "line fit")?;
    let n = x.len();
    let xbar = x.iter().sum::<f64>() / n as f64;
    let design = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] - xbar });
    let ls = lstsq(&design, &DVector::from_column_slice(y), weights)?;
    let s2 = ls.sigma2();
    let slope_se = (ls.cov_unscaled[(1, 1)] * s2).sqrt();
    let c01 = ls.cov_unscaled[(0, 1)] * s2;
    let var_int = ls.cov_unscaled[(0, 0)] * s2 - 2.0 * xbar * c01 + xbar * xbar * slope_se * slope_se;
    Ok(LineFit {
        slope: ls.coef[1],
        intercept: ls.coef[0] - ls.coef[1] * xbar,
        slope_se,
        intercept_se: var_int.max(0.0).sqrt(),
        slope_ci: slope_se * t95(ls.dof),
        dof: ls.dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn lin(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn exact_parabola() {
        let v = lin(-1.0, 1.0, 11);
        let e: Vec<f64> = v.iter().map(|v| 3.0 * (v - 0.04).powi(2) + 0.5).collect();
        let f = fit_parabola(&v, &e).unwrap();
        assert!((f.a - 3.0).abs() < 1e-12);
        assert!((f.v_opt - 0.04).abs() < 1e-12);
        assert!((f.b - 0.5).abs() < 1e-12);
        assert!(f.has_minimum && f.v_opt_in_range);
    }

    #[test]
    fn noisy_parabola_contains_truth() {
        let v = lin(-0.5, 0.5, 11);
        let mut hits = 0;
        for seed in 0..40 {
            let mut rng = crate::rng::stream(seed, "parabola", 0);
            let e: Vec<f64> = v
                .iter()
                .map(|v| 2.0 * (v - 0.04).powi(2) + 0.1 + 0.01 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let f = fit_parabola(&v, &e).unwrap();
            if (f.v_opt - 0.04).abs() <= f.v_opt_ci {
                hits += 1;
            }
        }
        assert!(hits >= 34, "{hits}/40");
    }

    #[test]
    fn symmetric_parabola_and_flags() {
        let v = lin(-2.0, 2.0, 9);
        let e: Vec<f64> = v.iter().map(|v| v * v).collect();
        let f = fit_parabola(&v, &e).unwrap();
        assert!(f.v_opt.abs() < 1e-12);
        let neg: Vec<f64> = e.iter().map(|x| -x).collect();
        assert!(!fit_parabola(&v, &neg).unwrap().has_minimum);
        assert!(fit_parabola(&[1.0, 1.0, 2.0, 2.0], &[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn gaussian_recovery_and_small_signal() {
        let v = lin(-60.0, 60.0, 25);
        let truth = GaussianFit { amplitude: -4.0, center: 3.0, width: 25.0, offset: 5.0, rss: 0.0, converged: true };
        let e: Vec<f64> = v.iter().map(|x| truth.eval(*x)).collect();
        let g = fit_gaussian(&v, &e).unwrap();
        assert!(g.converged);
        assert!((g.center - 3.0).abs() < 1e-6);
        assert!((g.width / 25.0 - 1.0).abs() < 1e-6);
        assert!((g.amplitude / -4.0 - 1.0).abs() < 1e-6);
        assert!((g.offset / 5.0 - 1.0).abs() < 1e-6);

        let v = lin(-1.0, 1.0, 9);
        let mut rng = crate::rng::stream(5, "g", 0);
        let e: Vec<f64> = v
            .iter()
            .map(|v| 1e-24 * ((v - 0.1).powi(2) + 0.2) * (1.0 + 0.02 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let p = fit_parabola(&v, &e).unwrap();
        let g = fit_gaussian(&v, &e).unwrap();
        assert!((g.center - p.v_opt).abs() < p.v_opt_ci, "{} {} {}", g.center, p.v_opt, p.v_opt_ci);
    }

    #[test]
    fn drift_fits() {
        let t = lin(0.0, 900.0, 19);
        let y: Vec<f64> = t.iter().map(|t| 0.3 + 0.5 * (-t / 300.0).exp()).collect();
        let f = fit_exponential_drift(&t, &y).unwrap();
        assert!((f.rc / 300.0 - 1.0).abs() < 1e-6, "{}", f.rc);
        assert!((f.v_final / 0.3 - 1.0).abs() < 1e-6);
        assert!((f.v_amplitude / 0.5 - 1.0).abs() < 1e-6);

        let c = fit_exponential_drift(&t, &vec![0.2; t.len()]).unwrap();
        assert!(c.v_amplitude.abs() < 1e-12);

        let mut rng = crate::rng::stream(9, "d", 0);
        let t = lin(0.0, 1200.0, 40);
        let y: Vec<f64> = t
            .iter()
            .map(|t| 0.3 + 0.6 * (-t / 300.0).exp() + 0.005 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let f = fit_exponential_drift(&t, &y).unwrap();
        assert!((f.rc / 300.0 - 1.0).abs() < 0.1, "{}", f.rc);
        assert!((f.v_final / 0.3 - 1.0).abs() < 0.1);
    }

    #[test]
    fn tau_scaling_fits() {
        let taus = lin(5e-6, 50e-6, 6);
        let q: Vec<f64> = taus.iter().map(|t| 7.0 * t.powi(4)).collect();
        let f = fit_tau_scaling(&taus, &q, None).unwrap();
        assert!(f.c2.abs() < 1e-9 * 7.0 * 50e-6f64.powi(2));
        let w = 2.0 * std::f64::consts::PI * 92e3;
        let a: Vec<f64> = taus
            .iter()
            .map(|t| crate::analytics::expected_scan_parabola(1e-16, *t, w, 3.975e-18).unwrap().a)
            .collect();
        let f = fit_tau_scaling(&taus, &a, None).unwrap();
        assert!((f.ratio() / (w * w / 4.0) - 1.0).abs() < 1e-6);
        assert!(fit_tau_scaling(&[1.0, 2.0], &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn line() {
        let x = lin(0.0, 10.0, 11);
        let y: Vec<f64> = x.iter().map(|x| 2.0 - 0.5 * x).collect();
        let f = fit_line(&x, &y, None).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && (f.intercept - 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn parabola_shift_equivariance(
            v0 in -1.0..1.0f64,
            a in 0.1..10.0f64,
            shift in -50.0..50.0f64,
            noise in proptest::collection::vec(-0.01..0.01f64, 9),
        ) {
            let v = lin(-1.0, 1.0, 9);
            let e: Vec<f64> = v.iter().zip(&noise).map(|(v, n)| a * (v - v0).powi(2) + 1.0 + n).collect();
            let vs: Vec<f64> = v.iter().map(|v| v + shift).collect();
            let f1 = fit_parabola(&v, &e).unwrap();
            let f2 = fit_parabola(&vs, &e).unwrap();
            prop_assert!((f2.v_opt - f1.v_opt - shift).abs() < 1e-9);
        }
    }
}
