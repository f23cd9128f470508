//! Command-line front end for the calibration pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or solve
//! failure. Logs go to stderr as `key=value` lines; artifacts go to files.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dhcal", version, about = "Calibrate and evaluate district heating network models")]
pub struct Cli {
    /// TOML run configuration; flags and DHCAL_* path variables override it
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Stderr log level: off, error, warn, info, debug or trace
    #[arg(long, global = true, value_name = "LEVEL", default_value = "info")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate raw sensor records and noise-free truth from a known model
    Simulate(SimulateArgs),
    /// Fit a model preset to a dataset by least absolute deviations
    Calibrate(CalibrateArgs),
    /// Predict consumer flows for every sample of a dataset
    Predict(PredictArgs),
    /// Compare predictions with observations and export plot data
    Evaluate(EvaluateArgs),
}

/// Windowing of raw 1 Hz files; ignored for processed datasets.
#[derive(Debug, Default, Args)]
pub struct WindowArgs {
    /// Window length in seconds [default: 40]
    #[arg(long, value_name = "SECONDS")]
    pub window: Option<f64>,
    /// Leading seconds dropped from each window [default: 10]
    #[arg(long, value_name = "SECONDS")]
    pub discard: Option<f64>,
    /// Negative flow means down to minus this value are clipped to zero [default: 0.05]
    #[arg(long, value_name = "L_PER_MIN")]
    pub clip: Option<f64>,
    /// Deadband filter placement for raw files: before or after windowing [default: before]
    #[arg(long, value_name = "ORDER")]
    pub filter_order: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Set-point protocol: exciting or loadcurve [default: exciting]
    #[arg(long, value_name = "PROTOCOL")]
    pub preset: Option<String>,
    /// Built-in truth model [default: model-C-exciting]
    #[arg(long, value_name = "NAME")]
    pub truth: Option<String>,
    /// Truth model file; takes precedence over --truth
    #[arg(long, env = "DHCAL_MODEL", value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Topology file replacing the truth model's own (ids must match)
    #[arg(long, env = "DHCAL_TOPOLOGY", value_name = "PATH")]
    pub topology: Option<PathBuf>,
    /// Reference flows for the loadcurve protocol: CSV with q1..qn columns
    #[arg(long, env = "DHCAL_REFERENCES", value_name = "PATH")]
    pub references: Option<PathBuf>,
    /// Number of dwells for the exciting protocol [default: 500]
    #[arg(long, value_name = "N")]
    pub dwells: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Seconds per dwell at 1 Hz [default: 40]
    #[arg(long, value_name = "SECONDS")]
    pub dwell_seconds: Option<u32>,
    /// Lowest commanded set-point [default: 0.3]
    #[arg(long, value_name = "V")]
    pub floor: Option<f64>,
    /// Highest commanded set-point [default: 1.0]
    #[arg(long, value_name = "V")]
    pub ceiling: Option<f64>,
    /// Deadband of the simulated valves [default: 0]
    #[arg(long, value_name = "DELTA")]
    pub delta_true: Option<f64>,
    /// Half-width of uniform flow meter noise in l/min [default: 0]
    #[arg(long, value_name = "L_PER_MIN")]
    pub noise: Option<f64>,
    /// Half-width of uniform pressure sensor noise in mH2O [default: 0]
    #[arg(long, value_name = "MH2O")]
    pub pressure_noise: Option<f64>,
    /// Root pressure difference in mH2O [default: 6]
    #[arg(long, value_name = "MH2O")]
    pub dp0: Option<f64>,
    /// Output directory for raw.csv and truth.csv [default: simulation]
    #[arg(long, env = "DHCAL_OUT_DIR", value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Dataset CSV, raw 1 Hz or processed
    #[arg(long, env = "DHCAL_DATA", value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Network topology JSON [default: built-in four-consumer line]
    #[arg(long, env = "DHCAL_TOPOLOGY", value_name = "PATH")]
    pub topology: Option<PathBuf>,
    /// Model preset: A, B or C [default: C]
    #[arg(long, value_name = "PRESET")]
    pub model: Option<String>,
    /// Deadband override; defaults to the preset's value
    #[arg(long, value_name = "DELTA")]
    pub delta: Option<f64>,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Rows with flow below this are excluded, l/min [default: 0.05]
    #[arg(long, value_name = "L_PER_MIN")]
    pub min_flow: Option<f64>,
    /// Simplex pivot cap [default: 50 x (columns + 3 x rows)]
    #[arg(long, value_name = "N")]
    pub max_iter: Option<usize>,
    /// Fitted model file [default: model.json]
    #[arg(long, env = "DHCAL_OUT", value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Fit report JSON [default: <out stem>.report.json]
    #[arg(long, env = "DHCAL_REPORT", value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Log of rejected windows, one per line
    #[arg(long, env = "DHCAL_REJECTS", value_name = "PATH")]
    pub rejects: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Model file
    #[arg(long, env = "DHCAL_MODEL", value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Built-in model used when no model file is given
    #[arg(long, value_name = "NAME")]
    pub fitted: Option<String>,
    /// Dataset CSV, raw 1 Hz or processed
    #[arg(long, env = "DHCAL_DATA", value_name = "PATH")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Prediction CSV with t,dp0,v*,q*,qhat* columns [default: predictions.csv]
    #[arg(long, env = "DHCAL_OUT", value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV written by predict
    #[arg(long, env = "DHCAL_PREDICTIONS", value_name = "PATH")]
    pub predictions: Option<PathBuf>,
    /// Observations; defaults to the observed columns of the prediction file
    #[arg(long, env = "DHCAL_DATA", value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Training dataset for set-point quantile bands
    #[arg(long, env = "DHCAL_TRAIN", value_name = "PATH")]
    pub train: Option<PathBuf>,
    /// Model file for valve curve exports
    #[arg(long, env = "DHCAL_MODEL", value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Half-width of the error band in l/min [default: 0.2]
    #[arg(long, value_name = "L_PER_MIN")]
    pub band: Option<f64>,
    #[command(flatten)]
    pub window: WindowArgs,
    /// Report directory [default: report]
    #[arg(long, env = "DHCAL_OUT_DIR", value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

fn init_logging(level: log::LevelFilter) {
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .format(|buf, record| {
            let level = record.level().as_str().to_ascii_lowercase();
            if record.target().starts_with("dhcal_cli") {
                writeln!(buf, "level={level} {}", record.args())
            } else {
                writeln!(buf, "level={level} target={} msg={:?}", record.target(), record.args().to_string())
            }
        })
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => config::RunConfig::load(path)?,
        None => config::RunConfig::default(),
    };
    match cli.command {
        Command::Simulate(args) => commands::simulate(&args, &cfg),
        Command::Calibrate(args) => commands::calibrate(&args, &cfg),
        Command::Predict(args) => commands::predict(&args, &cfg),
        Command::Evaluate(args) => commands::evaluate(&args, &cfg),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.log_level);
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("event=error code={} msg={:?}", e.exit_code(), e.to_string());
            e.exit_code()
        }
    }
}
