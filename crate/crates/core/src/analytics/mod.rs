//! Closed-form Gaussian-state predictions and covariance propagation.

mod closed_form;
mod lyapunov;

pub use closed_form::{
    displacement_from_voltage, ellipse_angle, expected_scan_parabola, free_expansion_variance,
    mean_energy_after_release, recapture_variance, recapture_variance_max, recompression_time,
    EllipseAngle, ScanPrediction,
};
pub use lyapunov::{lyapunov_propagate, propagate_mean, segments_from_schedule, SegmentLabel, SegmentModel};
