//! Langevin dynamics through pulse schedules, with detector readout and
//! feedback.

mod detector;
mod feedback;
mod integrator;
mod noise;
mod schedule;
mod thermal;

pub use detector::{DetectorChannel, DetectorModel};
pub use feedback::{cold_damping_force, AxisFeedback, FeedbackConfig, FeedbackController};
pub use integrator::{simulate, step, Drive, Integrator, RunOptions, Simulator, StepInputs, Trajectory};
pub use noise::{SupplyNoise, SupplyRange};
pub use schedule::{Action, Event, PulseSchedule};
pub use thermal::{sample_thermal_state, thermal_variances};
