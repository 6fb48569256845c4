use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

mod commands;
mod config;
mod output;

use commands::{AnalyzeArgs, CliError, FitKind, Outcome};
use config::{ExperimentConfig, Protocols};
use output::{canonical_json, sha256_hex, unix_now, write_manifest, write_outputs, RunManifest, Summary};

#[derive(Parser)]
#[command(name = "levisim", version, about = "Simulate and analyse release-recapture experiments on a levitated particle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; the reference setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Repetitions for every protocol that repeats.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and write the detector record.
    Simulate(Common),
    /// Release-recapture energy versus one compensation voltage.
    Scan(Common),
    /// Repeat the scan over release times.
    TauScan(Common),
    /// Iterative compensation of all three axes.
    Compensate3d(Common),
    /// Cross-feedback calibration of the electrode cross-talk.
    CalibrateCrosstalk(Common),
    /// Position spread versus recapture time after a release.
    Recompress(Common),
    /// Heating rate with the trap held at fixed electrode biases.
    Reheat(Common),
    /// Wide scan exposing the trap anharmonicity.
    Nonlinearity(Common),
    /// Lock-in charge measurement with an electrode drive.
    Charge(Common),
    /// Closed-form predictions for the configured release times.
    Predict(Common),
    /// Fit a model to two columns of a CSV file.
    Analyze(AnalyzeCmd),
}

#[derive(Args)]
struct AnalyzeCmd {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    fit: FitKind,
    /// Abscissa column; the first column by default.
    #[arg(long)]
    x: Option<String>,
    /// Ordinate column; the second column by default.
    #[arg(long)]
    y: Option<String>,
    /// Sine frequency (Hz).
    #[arg(long)]
    frequency: Option<f64>,
    /// PSD sample rate (Hz); inferred from the abscissa otherwise.
    #[arg(long)]
    sample_rate: Option<f64>,
    /// PSD segment length.
    #[arg(long, default_value_t = 1024)]
    segment: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

const DEFAULT_OUT: &str = "levisim-out";
const DEFAULT_SEED: u64 = 1;

fn apply_reps(p: &mut Protocols, n: usize) {
    p.scan.repetitions = n;
    p.tau_scan.scan.repetitions = n;
    p.compensate3d.scan.repetitions = n;
    p.recompress.options.repetitions = n;
    p.reheat.options.repetitions = n;
    p.nonlinearity.scan.repetitions = n;
}

fn threads() -> Result<usize, CliError> {
    if let Ok(v) = std::env::var("LEVISIM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::Config(format!("LEVISIM_THREADS: expected a positive integer, got {v:?}")))?;
        // Fails only if the pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

struct Prepared {
    exp: ExperimentConfig,
    sim: levisim::SimConfig,
    seed: u64,
    out: PathBuf,
    hash: String,
}

fn prepare(c: &Common) -> Result<Prepared, CliError> {
    let mut exp = match &c.config {
        Some(p) => config::load_config(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = c.reps.or(exp.repetitions) {
        if n == 0 {
            return Err(CliError::Config("repetitions: must be > 0".into()));
        }
        apply_reps(&mut exp.protocols, n);
    }
    let sim = exp.sim_config().map_err(|e| CliError::Config(e.to_string()))?;
    let seed = c.seed.or(exp.seed).unwrap_or(DEFAULT_SEED);
    let out = c.out.clone().or_else(|| exp.output_dir.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
    let resolved = json!({ "sim": sim, "protocols": exp.protocols });
    let hash = sha256_hex(canonical_json(&resolved).as_bytes());
    Ok(Prepared { exp, sim, seed, out, hash })
}

fn finish(
    command: &str,
    out: &std::path::Path,
    seed: u64,
    hash: String,
    threads: usize,
    started: f64,
    o: Outcome,
) -> Result<bool, CliError> {
    let summary = Summary {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config_hash: hash.clone(),
        result: o.result,
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", out.display()));
    let outputs = write_outputs(out, &o.tables, &summary).map_err(io)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: hash,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at: started,
        finished_at: unix_now(),
        threads,
        outputs,
    };
    write_manifest(out, &manifest).map_err(io)?;
    Ok(o.lost)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let started = unix_now();
    let threads = threads()?;
    if let Command::Analyze(a) = &cli.command {
        let o = commands::analyze(&AnalyzeArgs {
            input: &a.input,
            fit: a.fit,
            x: a.x.as_deref(),
            y: a.y.as_deref(),
            frequency: a.frequency,
            sample_rate: a.sample_rate,
            segment: a.segment,
        })?;
        let bytes = std::fs::read(&a.input).map_err(|e| CliError::Io(e.to_string()))?;
        let out = a.out.clone().unwrap_or_else(|| DEFAULT_OUT.into());
        return finish("analyze", &out, 0, sha256_hex(&bytes), threads, started, o);
    }
    let (name, common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c),
        Command::Scan(c) => ("scan", c),
        Command::TauScan(c) => ("tau-scan", c),
        Command::Compensate3d(c) => ("compensate3d", c),
        Command::CalibrateCrosstalk(c) => ("calibrate-crosstalk", c),
        Command::Recompress(c) => ("recompress", c),
        Command::Reheat(c) => ("reheat", c),
        Command::Nonlinearity(c) => ("nonlinearity", c),
        Command::Charge(c) => ("charge", c),
        Command::Predict(c) => ("predict", c),
        Command::Analyze(_) => unreachable!(),
    };
    let p = prepare(common)?;
    let (cfg, pr, seed) = (&p.sim, &p.exp.protocols, p.seed);
    let o = match &cli.command {
        Command::Simulate(_) => commands::simulate(cfg, pr, seed),
        Command::Scan(_) => commands::scan(cfg, pr, seed),
        Command::TauScan(_) => commands::tau_scan_cmd(cfg, pr, seed),
        Command::Compensate3d(_) => commands::compensate3d(cfg, pr, seed),
        Command::CalibrateCrosstalk(_) => commands::calibrate_crosstalk(cfg, pr, seed),
        Command::Recompress(_) => commands::recompress(cfg, pr, seed),
        Command::Reheat(_) => commands::reheat(cfg, pr, seed),
        Command::Nonlinearity(_) => commands::nonlinearity(cfg, pr, seed),
        Command::Charge(_) => commands::charge(cfg, pr, seed),
        Command::Predict(_) => commands::predict(cfg, pr),
        Command::Analyze(_) => unreachable!(),
    }?;
    finish(name, &p.out, seed, p.hash, threads, started, o)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("particle lost during the run; outputs written");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("levisim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
