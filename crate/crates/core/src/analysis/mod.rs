//! Time-series statistics and curve fits applied to detector traces.
//!
//! All routines take plain slices; calibration to physical units happens
//! before fitting.

mod ensemble;
mod fits;
mod sine;
mod spectral;
mod variance;

pub use ensemble::{ensemble_stats, EnsembleStats};
pub use fits::{
    fit_exponential_drift, fit_gaussian, fit_line, fit_parabola, fit_parabola_weighted, fit_tau_scaling,
    DriftFit, GaussianFit, LineFit, ParabolaFit, TauScalingFit,
};
pub(crate) use fits::t95;
pub use sine::{fit_sine, fit_sine_fixed, SineFit};
pub use spectral::{demodulate, equipartition_calibrate, integrate_band, integrate_peak, psd_welch, Demodulated, Psd};
pub use variance::{mean, moving_variance, population_variance, windowed_variance};
