//! Experiment configuration files.
//!
//! Every section is optional; anything left out takes the value of the
//! reference experiment. Unknown keys are rejected with their path.

use std::path::{Path, PathBuf};

use levisim::config::{Integration, REFERENCE_CNV, REFERENCE_FEEDBACK_GAINS, REFERENCE_FREQUENCIES_HZ, REFERENCE_NBAR, REFERENCE_TRAP_DEPTH};
use levisim::dynamics::{AxisFeedback, DetectorModel, Drive, FeedbackConfig, PulseSchedule, SupplyNoise};
use levisim::model::{epstein_damping, Axis, ChargeDrift, ElectrodeSystem, Environment, Particle, TrapField, TrapShape};
use levisim::protocols::{CrossCoolOptions, ReheatOptions, RecompressionOptions, ScanSpec};
use levisim::SimConfig;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(path: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{path}: {msg}"))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    /// Overrides the repetition count of whichever protocol runs.
    pub repetitions: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub particle: ParticleSection,
    pub trap: TrapSection,
    pub electrodes: ElectrodeSection,
    pub environment: EnvironmentSection,
    pub detectors: Option<DetectorModel>,
    pub feedback: FeedbackSection,
    pub supply_noise: Option<SupplyNoise>,
    pub integration: Option<Integration>,
    pub initial_nbar: Option<[f64; 3]>,
    pub dc_voltages: Option<[f64; 3]>,
    pub protocols: Protocols,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleSection {
    /// m.
    pub diameter: Option<f64>,
    /// kg/m^3.
    pub density: Option<f64>,
    /// kg; derived from diameter and density when absent.
    pub mass: Option<f64>,
    pub charge_q: Option<i64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapSection {
    pub frequencies_hz: Option<[f64; 3]>,
    /// J.
    pub depth: Option<f64>,
    pub shape: Option<TrapShape>,
}

/// Either a full geometry matrix or a measured normalised inverse plus the
/// diagonal transduction magnitudes. Matrices are given row by row.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectrodeSection {
    /// (V/m) per V.
    pub geometry: Option<[[f64; 3]; 3]>,
    pub normalized_inverse: Option<[[f64; 3]; 3]>,
    /// N/V.
    pub cnv: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentSection {
    pub pressure_mbar: Option<f64>,
    /// K.
    pub gas_temperature: Option<f64>,
    /// 1/s; derived from the pressure when absent.
    pub gamma: Option<f64>,
    /// N^2 s.
    pub recoil_dp: Option<[f64; 3]>,
    /// V/m.
    pub stray_field: Option<[f64; 3]>,
    /// N.
    pub nonelectrostatic_force: Option<[f64; 3]>,
    /// m/s^2.
    pub gravity: Option<[f64; 3]>,
    pub drift: Option<ChargeDrift>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSection {
    /// Damping rates (1/s).
    pub gains: Option<[f64; 3]>,
    pub enabled: Option<[bool; 3]>,
    /// Full per-axis loop settings; overrides the shorthand above.
    pub axes: Option<[AxisFeedback; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// s.
    pub duration: f64,
    pub schedule: Option<PulseSchedule>,
    pub release: Option<ReleaseSection>,
    pub drive: Option<Drive>,
    pub record_states: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { duration: 200e-6, schedule: None, release: None, drive: None, record_states: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseSection {
    pub time: f64,
    pub tau: f64,
    /// Feedback stays off this long after recapture; absent means forever.
    #[serde(default)]
    pub hold_off: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauScanSection {
    pub taus: Vec<f64>,
    /// Template; its range applies to the first tau.
    pub scan: ScanSpec,
}

impl Default for TauScanSection {
    fn default() -> Self {
        let mut scan = ScanSpec::new(Axis::Z, (-3.0, 3.0), 11, 5e-6);
        scan.repetitions = 10;
        Self { taus: vec![5e-6, 10e-6, 15e-6, 20e-6, 30e-6, 40e-6, 50e-6], scan }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Compensate3dSection {
    pub taus: Vec<f64>,
    /// Half-widths at the first tau (V), x, y, z.
    pub half_ranges: [f64; 3],
    pub scan: ScanSpec,
}

impl Default for Compensate3dSection {
    fn default() -> Self {
        let mut scan = ScanSpec::new(Axis::Z, (-1.0, 1.0), 9, 10e-6);
        scan.repetitions = 5;
        Self { taus: vec![10e-6, 20e-6, 50e-6, 100e-6], half_ranges: [60.0, 60.0, 2.0], scan }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecompressSection {
    pub tau: f64,
    /// Explicit trapping times; otherwise a grid about the ideal time.
    pub tp: Option<Vec<f64>>,
    pub half_span: f64,
    pub step: f64,
    pub options: RecompressionOptions,
}

impl Default for RecompressSection {
    fn default() -> Self {
        Self { tau: 5e-6, tp: None, half_span: 50e-9, step: 5e-9, options: RecompressionOptions::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReheatSection {
    /// Electrode voltages per series (V).
    pub biases: Vec<[f64; 3]>,
    pub duration: f64,
    pub options: ReheatOptions,
}

impl Default for ReheatSection {
    fn default() -> Self {
        Self {
            biases: vec![[0.0; 3], [0.0, 0.0, 10.0], [0.0, 0.0, 50.0], [0.0, 0.0, 100.0]],
            duration: 10e-3,
            options: ReheatOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearitySection {
    pub scan: ScanSpec,
    pub inner_fraction: f64,
    /// Replaces the configured trap shape for this protocol.
    pub trap_shape: Option<TrapShape>,
}

impl Default for NonlinearitySection {
    fn default() -> Self {
        let mut scan = ScanSpec::new(Axis::Z, (-160.0, 160.0), 31, 15e-6);
        scan.repetitions = 6;
        Self { scan, inner_fraction: 0.3, trap_shape: Some(TrapShape::GaussianEllipsoid) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChargeSection {
    pub drive_amplitude: f64,
    pub drive_frequency: f64,
    pub duration: f64,
    /// Measure this sequence of charge states and calibrate the step size.
    pub charges: Option<Vec<i64>>,
}

impl Default for ChargeSection {
    fn default() -> Self {
        Self { drive_amplitude: 5.0, drive_frequency: 120e3, duration: 1e-3, charges: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub axis: Axis,
    pub taus: Vec<f64>,
    /// Constant force for the displacement and energy columns (N).
    pub force: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self { axis: Axis::Z, taus: (1..=10).map(|k| k as f64 * 10e-6).collect(), force: 0.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocols {
    pub simulate: SimulateSection,
    pub scan: ScanSpec,
    pub tau_scan: TauScanSection,
    pub compensate3d: Compensate3dSection,
    pub calibrate_crosstalk: CrossCoolOptions,
    pub recompress: RecompressSection,
    pub reheat: ReheatSection,
    pub nonlinearity: NonlinearitySection,
    pub charge: ChargeSection,
    pub predict: PredictSection,
}

/// Parses a configuration file, reporting the path of the offending field.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ConfigError(e.into_inner().to_string())
        } else {
            bad(&path, e.into_inner())
        }
    })
}

fn positive(path: &str, v: Option<f64>) -> Result<(), ConfigError> {
    match v {
        Some(x) if !(x > 0.0) || !x.is_finite() => Err(bad(path, format!("must be > 0, got {x}"))),
        _ => Ok(()),
    }
}

fn rows(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

impl ExperimentConfig {
    /// Builds the simulation configuration, filling gaps with the reference
    /// values.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let p = &self.particle;
        positive("particle.diameter", p.diameter)?;
        positive("particle.density", p.density)?;
        positive("particle.mass", p.mass)?;
        let reference = Particle::reference();
        let diameter = p.diameter.unwrap_or(reference.diameter);
        let density = p.density.unwrap_or(reference.density);
        let charge_q = p.charge_q.unwrap_or(reference.charge_q);
        let particle = match p.mass {
            Some(m) => Particle::with_mass(m, diameter, density, charge_q),
            None => Particle::new(diameter, density, charge_q),
        }
        .map_err(|e| bad("particle", e))?;

        let t = &self.trap;
        if let Some(f) = t.frequencies_hz {
            if f.iter().any(|x| !(*x > 0.0)) {
                return Err(bad("trap.frequencies_hz", "must all be > 0"));
            }
        }
        positive("trap.depth", t.depth)?;
        let trap = TrapField::from_hz(
            particle.mass,
            t.frequencies_hz.unwrap_or(REFERENCE_FREQUENCIES_HZ),
            t.depth.unwrap_or(REFERENCE_TRAP_DEPTH),
            t.shape.unwrap_or_default(),
        )
        .map_err(|e| bad("trap", e))?;

        let el = &self.electrodes;
        let electrodes = match (&el.geometry, &el.normalized_inverse, &el.cnv) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(bad("electrodes", "give either geometry or normalized_inverse with cnv"))
            }
            (Some(g), None, None) => {
                ElectrodeSystem::from_geometry(rows(g), &particle).map_err(|e| bad("electrodes.geometry", e))?
            }
            (None, n, cnv) => {
                let n = n.as_ref().map(rows).unwrap_or_else(ElectrodeSystem::reference_normalized_inverse);
                // Default magnitudes belong to the reference particle's charge.
                let (cnv, measured_on) = match cnv {
                    Some(c) => (*c, particle.clone()),
                    None => (REFERENCE_CNV, particle.with_charge(reference.charge_q)),
                };
                if cnv.iter().any(|c| !(*c > 0.0)) {
                    return Err(bad("electrodes.cnv", "must all be > 0"));
                }
                ElectrodeSystem::from_normalized_inverse(&n, cnv, &measured_on)
                    .map_err(|e| bad("electrodes.normalized_inverse", e))?
                    .for_particle(&particle)
            }
        };

        let e = &self.environment;
        let mut environment = Environment::reference(&particle);
        if let Some(pr) = e.pressure_mbar {
            if !(pr >= 0.0) {
                return Err(bad("environment.pressure_mbar", format!("must be >= 0, got {pr}")));
            }
            environment.pressure_mbar = Some(pr);
        }
        if let Some(tg) = e.gas_temperature {
            environment.gas_temperature = tg;
        }
        environment.gamma = match e.gamma {
            Some(g) => g,
            None => epstein_damping(
                environment.pressure_mbar.unwrap_or(0.0),
                environment.gas_temperature,
                particle.diameter,
                particle.density,
            )
            .map_err(|err| bad("environment", err))?,
        };
        if let Some(r) = e.recoil_dp {
            environment.recoil_dp = r;
        }
        if let Some(s) = e.stray_field {
            environment.stray_field = Vector3::from(s);
        }
        if let Some(f) = e.nonelectrostatic_force {
            environment.nonelectrostatic_force = Vector3::from(f);
        }
        if let Some(g) = e.gravity {
            environment.gravity = Vector3::from(g);
        }
        environment.drift = e.drift;
        environment.validate().map_err(|err| bad("environment", err))?;

        let fb = &self.feedback;
        let feedback = match &fb.axes {
            Some(axes) => FeedbackConfig { axes: *axes },
            None => {
                let mut f = FeedbackConfig::new(fb.gains.unwrap_or(REFERENCE_FEEDBACK_GAINS));
                if let Some(on) = fb.enabled {
                    for (a, on) in f.axes.iter_mut().zip(on) {
                        a.enabled = on;
                    }
                }
                f
            }
        };

        let cfg = SimConfig {
            particle,
            trap,
            electrodes,
            environment,
            detectors: self.detectors.clone().unwrap_or_else(DetectorModel::reference),
            feedback,
            supply_noise: self.supply_noise.clone(),
            integration: self.integration.unwrap_or_default(),
            initial_nbar: self.initial_nbar.unwrap_or(REFERENCE_NBAR),
            dc_voltages: self.dc_voltages.unwrap_or([0.0; 3]),
        };
        cfg.validate().map_err(|err| ConfigError(err.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_reference_experiment() {
        let c = parse_config("{}").unwrap().sim_config().unwrap();
        assert_eq!(c, SimConfig::reference());
        assert!((c.particle.mass / 3.98e-18 - 1.0).abs() < 0.01);
        let f = c.trap.omega.map(|w| w / (2.0 * std::f64::consts::PI));
        assert!((f[0] - 302e3).abs() < 1e-6 && (f[1] - 268e3).abs() < 1e-6 && (f[2] - 92e3).abs() < 1e-6);
    }

    #[test]
    fn negative_mass_names_the_field() {
        let e = parse_config(r#"{"particle": {"mass": -1e-18}}"#).unwrap().sim_config().unwrap_err();
        assert!(e.0.starts_with("particle.mass"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let e = parse_config(r#"{"protocols": {"scan": {"axis": "z", "volts": 3}}}"#).unwrap_err();
        assert!(e.0.starts_with("protocols.scan"), "{e}");
        assert!(e.0.contains("volts"), "{e}");
        assert!(parse_config(r#"{"particel": {}}"#).is_err());
    }

    #[test]
    fn neutral_particle_keeps_geometry() {
        let c = parse_config(r#"{"particle": {"charge_q": 0}}"#).unwrap().sim_config().unwrap();
        assert_eq!(c.electrodes.transduction, Matrix3::zeros());
        assert_eq!(c.electrodes.geometry, SimConfig::reference().electrodes.geometry);
    }
}
