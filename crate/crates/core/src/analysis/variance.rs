use crate::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Variance about the sample mean, normalised by `n`.
pub fn population_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn window_samples(window: f64, sample_rate: f64) -> Result<usize> {
    if !(window > 0.0) || !(sample_rate > 0.0) {
        return Err(Error::domain("window and sample rate must be > 0"));
    }
    Ok((window * sample_rate).round() as usize)
}

/// Variance of the first `window` seconds of `trace`.
///
/// For a sinusoid over an integer number of periods this is `a^2 / 2`, i.e.
/// proportional to the mean oscillation energy.
pub fn windowed_variance(trace: &[f64], sample_rate: f64, window: f64) -> Result<f64> {
    let n = window_samples(window, sample_rate)?;
    if n == 0 {
        return Err(Error::InsufficientData("empty variance window".into()));
    }
    if n > trace.len() {
        return Err(Error::InsufficientData(format!(
            "window of {n} samples exceeds trace of {}",
            trace.len()
        )));
    }
    Ok(population_variance(&trace[..n]))
}

/// Centred sliding-window variance; the window is truncated at the edges.
pub fn moving_variance(trace: &[f64], sample_rate: f64, window: f64) -> Result<Vec<f64>> {
    let n = window_samples(window, sample_rate)?;
    if n == 0 {
        return Err(Error::InsufficientData("empty variance window".into()));
    }
    if trace.is_empty() {
        return Ok(Vec::new());
    }
    // Prefix sums about the global mean keep cancellation small.
    let m = mean(trace);
    let mut s1 = Vec::with_capacity(trace.len() + 1);
    let mut s2 = Vec::with_capacity(trace.len() + 1);
    s1.push(0.0);
    s2.push(0.0);
    for v in trace {
        let d = v - m;
        s1.push(s1.last().unwrap() + d);
        s2.push(s2.last().unwrap() + d * d);
    }
    let half_lo = n / 2;
    let half_hi = n - half_lo;
    Ok((0..trace.len())
        .map(|i| {
            let a = i.saturating_sub(half_lo);
            let b = (i + half_hi).min(trace.len());
            let k = (b - a) as f64;
            let mu = (s1[b] - s1[a]) / k;
            ((s2[b] - s2[a]) / k - mu * mu).max(0.0)
        })
        .collect())
}
