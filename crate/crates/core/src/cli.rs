//! Command-line front end: config parsing, dispatch, and emission.
//!
//! Rates are computed in nats throughout and converted to bits only when an
//! artifact is rendered.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capacity::{
    calibrate_e, evaluate_policy, optimize_capacity, sweep, CapacityResult, OptimizeOptions, SweepAxis,
};
use crate::channel_model::{pad_orders, validate_arma_spec, ArmaNoiseSpec, StateSpaceChannel};
use crate::kalman::{innovation_stats, riccati_residual, SourcePolicy};
use crate::rng::GaussianStream;
use crate::simulator::{simulate_closed_loop, SimulationStats};
use crate::verify::{random_spec, run_oracles, Oracle, OracleReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COMPUTATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandName {
    Capacity,
    Rate,
    Riccati,
    Simulate,
    Sweep,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Nats,
    Bits,
}

impl Unit {
    pub fn convert(self, nats: f64) -> f64 {
        match self {
            Unit::Nats => nats,
            Unit::Bits => nats / std::f64::consts::LN_2,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Unit::Nats => "nats",
            Unit::Bits => "bits",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisName {
    Nu,
    Power,
}

/// Raw command-line flags.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "fbcap", version, about = "Feedback capacity of ARMA Gaussian noise channels")]
pub struct Flags {
    /// Channel config file (TOML, or JSON if it starts with `{`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub command: Option<CommandName>,
    /// Feedback vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub d: Option<Vec<f64>>,
    /// Innovation gain; calibrated to the power constraint when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub e: Option<f64>,
    /// Number of simulated channel uses.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub axis: Option<AxisName>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub unit: Option<Unit>,
    #[arg(long, value_enum)]
    pub format: Option<OutputFormat>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for the optimizer (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides `nu` from the config file.
    #[arg(long, allow_hyphen_values = true)]
    pub nu: Option<i64>,
    /// Overrides `power` from the config file.
    #[arg(long, allow_hyphen_values = true)]
    pub power: Option<f64>,
    /// Oracles run by `verify`, comma separated (default: all).
    #[arg(long, value_delimiter = ',')]
    pub oracles: Option<Vec<String>>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse_config: {0}")]
    Parse(String),

    #[error("parse_config: invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("parse_config: {0}")]
    Conflict(String),

    #[error("{command}: {source}")]
    Computation {
        command: &'static str,
        #[source]
        source: crate::Error,
    },

    #[error("write output: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Validation { .. } | CliError::Conflict(_) => EXIT_CONFIG,
            CliError::Computation { .. } | CliError::Io(_) => EXIT_COMPUTATION,
        }
    }
}

/// Fully validated work order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub channel: ArmaNoiseSpec,
    pub label: Option<String>,
    pub command: Command,
    pub output_path: Option<PathBuf>,
    pub output_format: OutputFormat,
    pub unit: Unit,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Capacity { seed: u64 },
    Rate { d: Vec<f64>, e: Option<f64> },
    Riccati { d: Vec<f64>, e: Option<f64> },
    /// `policy = None` simulates the optimized policy.
    Simulate {
        policy: Option<(Vec<f64>, Option<f64>)>,
        n: usize,
        seed: u64,
    },
    Sweep { axis: SweepAxis, values: Vec<f64>, seed: u64 },
    Verify { seed: u64, oracles: Vec<Oracle> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Capacity { .. } => "capacity",
            Command::Rate { .. } => "rate",
            Command::Riccati { .. } => "riccati",
            Command::Simulate { .. } => "simulate",
            Command::Sweep { .. } => "sweep",
            Command::Verify { .. } => "verify",
        }
    }
}

/// Channel section of a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileConfig {
    pub a: Vec<f64>,
    pub c_ar: Vec<f64>,
    pub sigma_w2: f64,
    pub nu: i64,
    pub power: f64,
    pub label: Option<String>,
}

const FILE_KEYS: [&str; 6] = ["a", "c_ar", "sigma_w2", "nu", "power", "label"];

fn field_number(table: &serde_json::Map<String, Value>, key: &str) -> Result<f64, CliError> {
    match table.get(key) {
        None => Err(CliError::Parse(format!("missing key `{key}`"))),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| CliError::Parse(format!("key `{key}` must be a number, got {v}"))),
    }
}

fn field_list(table: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<f64>, CliError> {
    let items = table
        .get(key)
        .ok_or_else(|| CliError::Parse(format!("missing key `{key}`")))?
        .as_array()
        .ok_or_else(|| CliError::Parse(format!("key `{key}` must be a list of numbers")))?;
    items
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| CliError::Parse(format!("key `{key}` must be a list of numbers, found {v}")))
        })
        .collect()
}

/// Reads the channel section from TOML (or JSON when the text starts
/// with `{`).
pub fn parse_file(contents: &str) -> Result<FileConfig, CliError> {
    let value: Value = if contents.trim_start().starts_with('{') {
        serde_json::from_str(contents).map_err(|e| CliError::Parse(format!("malformed JSON: {e}")))?
    } else {
        let table: toml::Table = contents
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(format!("malformed TOML: {}", e.message())))?;
        serde_json::to_value(table).map_err(|e| CliError::Parse(e.to_string()))?
    };
    let table = value
        .as_object()
        .ok_or_else(|| CliError::Parse("config must be a table of keys".into()))?;
    if let Some(unknown) = table.keys().find(|k| !FILE_KEYS.contains(&k.as_str())) {
        return Err(CliError::Parse(format!("unknown key `{unknown}`")));
    }
    let nu = match table.get("nu") {
        None => return Err(CliError::Parse("missing key `nu`".into())),
        Some(v) => v
            .as_i64()
            .ok_or_else(|| CliError::Parse(format!("key `nu` must be an integer, got {v}")))?,
    };
    let label = match table.get("label") {
        None => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(v) => return Err(CliError::Parse(format!("key `label` must be a string, got {v}"))),
    };
    Ok(FileConfig {
        a: field_list(table, "a")?,
        c_ar: field_list(table, "c_ar")?,
        sigma_w2: field_number(table, "sigma_w2")?,
        nu,
        power: field_number(table, "power")?,
        label,
    })
}

fn validation(field: &str, message: impl Into<String>) -> CliError {
    CliError::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

fn spec_from_file(file: &FileConfig) -> Result<ArmaNoiseSpec, CliError> {
    if file.nu < 1 {
        return Err(validation("nu", format!("feedback delay must be >= 1, got {}", file.nu)));
    }
    let spec = ArmaNoiseSpec::new(
        file.a.clone(),
        file.c_ar.clone(),
        file.sigma_w2,
        file.nu as usize,
        file.power,
    );
    checked(&spec)?;
    Ok(spec)
}

/// Channel validation with the offending field named.
fn checked(spec: &ArmaNoiseSpec) -> Result<(), CliError> {
    validate_arma_spec(spec).map(|_| ()).map_err(|e| {
        let field = match &e {
            crate::Error::InvalidScalar { field, .. } => *field,
            crate::Error::NonMinimumPhase { polynomial, .. } if polynomial.contains("c_ar") => "c_ar",
            crate::Error::NonMinimumPhase { .. } => "a",
            _ => "channel",
        };
        validation(field, e.to_string())
    })
}

fn forbid<T>(value: &Option<T>, flag: &str, command: CommandName) -> Result<(), CliError> {
    if value.is_some() {
        return Err(CliError::Conflict(format!(
            "--{flag} has no meaning for command `{}`",
            command_label(command)
        )));
    }
    Ok(())
}

fn command_label(c: CommandName) -> &'static str {
    match c {
        CommandName::Capacity => "capacity",
        CommandName::Rate => "rate",
        CommandName::Riccati => "riccati",
        CommandName::Simulate => "simulate",
        CommandName::Sweep => "sweep",
        CommandName::Verify => "verify",
    }
}

fn check_policy(d: &Option<Vec<f64>>, e: Option<f64>, order: usize) -> Result<(), CliError> {
    if let Some(d) = d {
        if d.len() != order {
            return Err(validation(
                "d",
                format!("expected {order} entries (state dimension), got {}", d.len()),
            ));
        }
        if d.iter().any(|v| !v.is_finite()) {
            return Err(validation("d", "entries must be finite"));
        }
    }
    if let Some(e) = e {
        if !(e.is_finite() && e >= 0.0) {
            return Err(validation("e", format!("must be finite and >= 0, got {e}")));
        }
    }
    Ok(())
}

/// Builds a [`RunConfig`] from config-file text and flags; flags win.
///
/// `contents` may be `None` only for `verify`, which then draws a random
/// channel from the seed.
pub fn parse_config(contents: Option<&str>, flags: &Flags) -> Result<RunConfig, CliError> {
    let name = flags
        .command
        .ok_or_else(|| CliError::Conflict("--command is required".into()))?;
    let seed = flags.seed.unwrap_or(0);

    let mut label = None;
    let channel = match contents {
        Some(text) => {
            let mut file = parse_file(text)?;
            if let Some(nu) = flags.nu {
                file.nu = nu;
            }
            if let Some(p) = flags.power {
                file.power = p;
            }
            label = file.label.clone();
            spec_from_file(&file)?
        }
        None if name == CommandName::Verify => {
            let mut spec = random_spec(&mut GaussianStream::new(seed), 3, 3, 4);
            if let Some(nu) = flags.nu {
                if nu < 1 {
                    return Err(validation("nu", format!("feedback delay must be >= 1, got {nu}")));
                }
                spec.nu = nu as usize;
            }
            if let Some(p) = flags.power {
                spec.power = p;
            }
            spec
        }
        None => {
            return Err(CliError::Conflict(format!(
                "command `{}` needs --config",
                command_label(name)
            )))
        }
    };
    if contents.is_none() {
        checked(&channel)?;
    }
    let order = pad_orders(&channel).order;

    let takes_policy = matches!(name, CommandName::Rate | CommandName::Riccati | CommandName::Simulate);
    if !takes_policy {
        forbid(&flags.d, "d", name)?;
        forbid(&flags.e, "e", name)?;
    }
    if name != CommandName::Simulate {
        forbid(&flags.n, "n", name)?;
    }
    if name != CommandName::Sweep {
        forbid(&flags.axis, "axis", name)?;
        forbid(&flags.values, "values", name)?;
    }
    if name != CommandName::Verify {
        forbid(&flags.oracles, "oracles", name)?;
    }
    if matches!(name, CommandName::Rate | CommandName::Riccati) {
        forbid(&flags.seed, "seed", name)?;
    }
    if flags.threads == Some(0) {
        return Err(validation("threads", "must be >= 1"));
    }
    check_policy(&flags.d, flags.e, order)?;

    let command = match name {
        CommandName::Capacity => Command::Capacity { seed },
        CommandName::Rate | CommandName::Riccati => {
            let d = match (&flags.d, flags.e) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => vec![0.0; order],
                (None, None) => {
                    return Err(CliError::Conflict(format!(
                        "command `{}` needs --d and/or --e",
                        command_label(name)
                    )))
                }
            };
            if name == CommandName::Rate {
                Command::Rate { d, e: flags.e }
            } else {
                Command::Riccati { d, e: flags.e }
            }
        }
        CommandName::Simulate => {
            let n = flags.n.unwrap_or(DEFAULT_STEPS);
            if n == 0 {
                return Err(validation("n", "must be >= 1"));
            }
            let policy = match (&flags.d, flags.e) {
                (None, None) => None,
                (d, e) => Some((d.clone().unwrap_or_else(|| vec![0.0; order]), e)),
            };
            Command::Simulate { policy, n, seed }
        }
        CommandName::Sweep => {
            let values = flags
                .values
                .clone()
                .ok_or_else(|| CliError::Conflict("command `sweep` needs --values".into()))?;
            let axis = match flags.axis {
                Some(AxisName::Nu) => SweepAxis::Nu,
                Some(AxisName::Power) => SweepAxis::Power,
                None => return Err(CliError::Conflict("command `sweep` needs --axis".into())),
            };
            if values.is_empty() {
                return Err(validation("values", "at least one value is required"));
            }
            Command::Sweep { axis, values, seed }
        }
        CommandName::Verify => {
            let oracles = match &flags.oracles {
                None => Oracle::ALL.to_vec(),
                Some(names) => names
                    .iter()
                    .map(|n| {
                        Oracle::from_name(n.trim())
                            .ok_or_else(|| validation("oracles", format!("unknown oracle `{n}`")))
                    })
                    .collect::<Result<_, _>>()?,
            };
            Command::Verify { seed, oracles }
        }
    };

    let default_format = match name {
        CommandName::Sweep | CommandName::Simulate => OutputFormat::Csv,
        _ => OutputFormat::Json,
    };
    Ok(RunConfig {
        channel,
        label,
        command,
        output_path: flags.out.clone(),
        output_format: flags.format.unwrap_or(default_format),
        unit: flags.unit.unwrap_or(Unit::Nats),
        threads: flags.threads,
    })
}

/// Hex SHA-256 of the channel spec's JSON form.
pub fn spec_hash(spec: &ArmaNoiseSpec) -> String {
    let json = serde_json::to_string(spec).expect("spec serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Rendered artifact and whether the run counts as a success.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub body: String,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub label: Option<String>,
    pub unit: Unit,
    pub rate: f64,
    pub spec: ArmaNoiseSpec,
    pub result: CapacityResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub label: Option<String>,
    pub unit: Unit,
    pub rate: f64,
    pub d: Vec<f64>,
    pub e: f64,
    pub e_calibrated: bool,
    pub power: f64,
    pub innovation_variance: f64,
    pub riccati_iterations: usize,
    pub riccati_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiReport {
    pub label: Option<String>,
    pub d: Vec<f64>,
    pub e: f64,
    pub k: Vec<Vec<f64>>,
    pub iterations: usize,
    pub riccati_residual: f64,
    pub power: f64,
    pub innovation_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub label: Option<String>,
    pub unit: Unit,
    pub spec_hash: String,
    pub seed: u64,
    pub d: Vec<f64>,
    pub e: f64,
    pub predicted_rate: f64,
    pub empirical_rate: f64,
    pub predicted_innovation_variance: f64,
    pub stats: SimulationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReportRow {
    pub value: f64,
    pub rate: f64,
    pub achieved_power: f64,
    pub riccati_residual: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub label: Option<String>,
    pub axis: SweepAxis,
    pub unit: Unit,
    pub rows: Vec<SweepReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub spec: ArmaNoiseSpec,
    pub oracles: Vec<OracleReport>,
    pub passed: bool,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

fn key_value_csv(rows: &[(&str, String)]) -> String {
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

/// Resolves `(d, e)`, calibrating `e` when it is not given.
fn resolve_policy(
    command: &'static str,
    channel: &StateSpaceChannel,
    d: &[f64],
    e: Option<f64>,
    power: f64,
) -> Result<(SourcePolicy, bool), CliError> {
    let fail = |source| CliError::Computation { command, source };
    let d = DVector::from_column_slice(d);
    match e {
        Some(e) => Ok((SourcePolicy::new(d, e).map_err(fail)?, false)),
        None => {
            let cal = calibrate_e(channel, &d, power).map_err(fail)?;
            Ok((SourcePolicy::new(d, cal.e).map_err(fail)?, true))
        }
    }
}

/// Runs the command and renders its artifact without touching the file
/// system.
pub fn execute(config: &RunConfig) -> Result<Emission, CliError> {
    let command = config.command.name();
    let fail = |source| CliError::Computation { command, source };
    let spec = &config.channel;
    let unit = config.unit;
    let csv = config.output_format == OutputFormat::Csv;
    let channel = StateSpaceChannel::from_spec(spec).map_err(fail)?;

    let body = match &config.command {
        Command::Capacity { seed } => {
            let opts = OptimizeOptions {
                seed: *seed,
                ..OptimizeOptions::default()
            };
            let result = optimize_capacity(&channel, spec.power, &opts);
            let report = CapacityReport {
                label: config.label.clone(),
                unit,
                rate: unit.convert(result.rate_nats),
                spec: spec.clone(),
                result,
            };
            if csv {
                let r = &report.result;
                key_value_csv(&[
                    ("unit", unit.label().into()),
                    ("rate", format!("{:?}", report.rate)),
                    ("d_opt", fmt_list(&r.d_opt)),
                    ("e_opt", format!("{:?}", r.e_opt)),
                    ("achieved_power", format!("{:?}", r.achieved_power)),
                    ("riccati_residual", format!("{:?}", r.riccati_residual)),
                    ("optimizer_evaluations", r.optimizer_evaluations.to_string()),
                ])
            } else {
                to_json(&report)
            }
        }
        Command::Rate { d, e } => {
            let (policy, calibrated) = resolve_policy(command, &channel, d, *e, spec.power)?;
            let ev = evaluate_policy(&channel, &policy).map_err(fail)?;
            let report = RateReport {
                label: config.label.clone(),
                unit,
                rate: unit.convert(ev.rate_nats),
                d: d.clone(),
                e: policy.e(),
                e_calibrated: calibrated,
                power: ev.power,
                innovation_variance: innovation_stats(&channel, &ev.cov).variance,
                riccati_iterations: ev.iterations,
                riccati_residual: riccati_residual(&channel, &policy, &ev.cov),
            };
            if csv {
                key_value_csv(&[
                    ("unit", unit.label().into()),
                    ("rate", format!("{:?}", report.rate)),
                    ("d", fmt_list(&report.d)),
                    ("e", format!("{:?}", report.e)),
                    ("power", format!("{:?}", report.power)),
                    ("innovation_variance", format!("{:?}", report.innovation_variance)),
                    ("riccati_residual", format!("{:?}", report.riccati_residual)),
                ])
            } else {
                to_json(&report)
            }
        }
        Command::Riccati { d, e } => {
            let (policy, _) = resolve_policy(command, &channel, d, *e, spec.power)?;
            let ev = evaluate_policy(&channel, &policy).map_err(fail)?;
            let k: Vec<Vec<f64>> = ev.cov.row_iter().map(|r| r.iter().copied().collect()).collect();
            let report = RiccatiReport {
                label: config.label.clone(),
                d: d.clone(),
                e: policy.e(),
                iterations: ev.iterations,
                riccati_residual: riccati_residual(&channel, &policy, &ev.cov),
                power: ev.power,
                innovation_variance: innovation_stats(&channel, &ev.cov).variance,
                k,
            };
            if csv {
                let mut out = String::new();
                for row in &report.k {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                    let _ = writeln!(out, "{}", cells.join(","));
                }
                out
            } else {
                to_json(&report)
            }
        }
        Command::Simulate { policy, n, seed } => {
            let (policy, _) = match policy {
                Some((d, e)) => resolve_policy(command, &channel, d, *e, spec.power)?,
                None => {
                    let best = optimize_capacity(&channel, spec.power, &OptimizeOptions::default());
                    (best.policy().map_err(fail)?, true)
                }
            };
            let ev = evaluate_policy(&channel, &policy).map_err(fail)?;
            let (traj, stats) = simulate_closed_loop(&channel, &policy, *n, *seed).map_err(fail)?;
            let hash = spec_hash(spec);
            if csv {
                let mut buf = Vec::new();
                traj.write_csv(&hash, &mut buf)?;
                String::from_utf8(buf).expect("CSV is ASCII")
            } else {
                to_json(&SimulationReport {
                    label: config.label.clone(),
                    unit,
                    spec_hash: hash,
                    seed: *seed,
                    d: policy.d().iter().copied().collect(),
                    e: policy.e(),
                    predicted_rate: unit.convert(ev.rate_nats),
                    empirical_rate: unit.convert(stats.empirical_rate_nats),
                    predicted_innovation_variance: innovation_stats(&channel, &ev.cov).variance,
                    stats,
                })
            }
        }
        Command::Sweep { axis, values, seed } => {
            let opts = OptimizeOptions {
                seed: *seed,
                ..OptimizeOptions::default()
            };
            let rows: Vec<SweepReportRow> = sweep(spec, *axis, values, &opts)
                .map_err(fail)?
                .into_iter()
                .map(|r| SweepReportRow {
                    value: r.value,
                    rate: unit.convert(r.rate_nats),
                    achieved_power: r.achieved_power,
                    riccati_residual: r.riccati_residual,
                    error: r.error,
                })
                .collect();
            if csv {
                let axis_name = match axis {
                    SweepAxis::Nu => "nu",
                    SweepAxis::Power => "power",
                };
                let mut out = format!("{axis_name},rate_{},achieved_power,riccati_residual,error\n", unit.label());
                for r in &rows {
                    let _ = writeln!(
                        out,
                        "{:?},{:?},{:?},{:?},{}",
                        r.value,
                        r.rate,
                        r.achieved_power,
                        r.riccati_residual,
                        r.error.as_deref().unwrap_or("").replace(',', ";")
                    );
                }
                out
            } else {
                to_json(&SweepReport {
                    label: config.label.clone(),
                    axis: *axis,
                    unit,
                    rows,
                })
            }
        }
        Command::Verify { seed, oracles } => {
            let reports = run_oracles(spec, *seed, oracles).map_err(fail)?;
            let passed = reports.iter().all(|r| r.passed);
            let body = if csv {
                let mut out = String::from("oracle,trials,max_deviation,tolerance,passed\n");
                for r in &reports {
                    let _ = writeln!(
                        out,
                        "{},{},{:?},{:?},{}",
                        r.oracle.name(),
                        r.trials,
                        r.max_deviation,
                        r.tolerance,
                        r.passed
                    );
                }
                out
            } else {
                to_json(&VerifyReport {
                    seed: *seed,
                    spec: spec.clone(),
                    oracles: reports,
                    passed,
                })
            };
            return Ok(Emission { body, success: passed });
        }
    };
    Ok(Emission { body, success: true })
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Executes `config` and emits the artifact to `--out` or `stdout`.
/// Returns the process exit code.
pub fn run(config: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let outcome = match config.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(config)),
            Err(e) => Err(CliError::Computation {
                command: config.command.name(),
                source: crate::Error::InvalidScalar {
                    field: "threads",
                    reason: e.to_string(),
                },
            }),
        },
        None => execute(config),
    };
    let emission = match outcome {
        Ok(em) => em,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return e.exit_code();
        }
    };
    let written = match &config.output_path {
        Some(path) => write_atomic(path, emission.body.as_bytes()),
        None => stdout.write_all(emission.body.as_bytes()),
    };
    if let Err(e) = written {
        let _ = writeln!(stderr, "error: {}", CliError::Io(e));
        return EXIT_COMPUTATION;
    }
    if emission.success {
        EXIT_OK
    } else {
        let _ = writeln!(stderr, "error: verify: at least one oracle failed");
        EXIT_COMPUTATION
    }
}

/// Whole program: parse flags, read the config, run.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let flags = match Flags::try_parse_from(args) {
        Ok(f) => f,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(stderr, "{rendered}");
            } else {
                let _ = write!(stdout, "{rendered}");
            }
            return code;
        }
    };
    let contents = match &flags.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(s) => Some(s),
            Err(e) => {
                let _ = writeln!(
                    stderr,
                    "error: {}",
                    CliError::Parse(format!("cannot read {}: {e}", path.display()))
                );
                return EXIT_CONFIG;
            }
        },
        None => None,
    };
    match parse_config(contents.as_deref(), &flags) {
        Ok(config) => run(&config, stdout, stderr),
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "a = [0.5]\nc_ar = []\nsigma_w2 = 1\nnu = 1\npower = 1\n";

    fn flags(command: CommandName) -> Flags {
        Flags {
            command: Some(command),
            ..Flags::default()
        }
    }

    #[test]
    fn minimal_capacity_config() {
        let cfg = parse_config(Some(MINIMAL), &flags(CommandName::Capacity)).unwrap();
        assert_eq!(cfg.channel, ArmaNoiseSpec::new(vec![0.5], vec![], 1.0, 1, 1.0));
        assert_eq!(cfg.command, Command::Capacity { seed: 0 });
        assert_eq!(cfg.output_format, OutputFormat::Json);
        assert_eq!(cfg.unit, Unit::Nats);
    }

    #[test]
    fn json_config_is_accepted() {
        let text = r#"{"a":[0.5],"c_ar":[],"sigma_w2":1,"nu":1,"power":1,"label":"ma1"}"#;
        let cfg = parse_config(Some(text), &flags(CommandName::Capacity)).unwrap();
        assert_eq!(cfg.label.as_deref(), Some("ma1"));
    }

    #[test]
    fn zero_delay_names_nu() {
        let text = MINIMAL.replace("nu = 1", "nu = 0");
        match parse_config(Some(&text), &flags(CommandName::Capacity)) {
            Err(CliError::Validation { field, .. }) => assert_eq!(field, "nu"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flag_overrides_file() {
        let mut f = flags(CommandName::Capacity);
        f.nu = Some(3);
        f.power = Some(2.0);
        let cfg = parse_config(Some(MINIMAL), &f).unwrap();
        assert_eq!(cfg.channel.nu, 3);
        assert_eq!(cfg.channel.power, 2.0);
    }

    #[test]
    fn sweep_needs_values() {
        let mut f = flags(CommandName::Sweep);
        f.axis = Some(AxisName::Power);
        let err = parse_config(Some(MINIMAL), &f).unwrap_err();
        assert!(matches!(err, CliError::Conflict(_)));
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn axis_outside_sweep_conflicts() {
        let mut f = flags(CommandName::Capacity);
        f.axis = Some(AxisName::Nu);
        assert!(matches!(parse_config(Some(MINIMAL), &f), Err(CliError::Conflict(_))));
    }

    #[test]
    fn malformed_and_unknown_keys() {
        assert!(matches!(
            parse_config(Some("a = [0.5"), &flags(CommandName::Capacity)),
            Err(CliError::Parse(_))
        ));
        let text = format!("{MINIMAL}extra = 1\n");
        assert!(matches!(
            parse_config(Some(&text), &flags(CommandName::Capacity)),
            Err(CliError::Parse(_))
        ));
    }

    #[test]
    fn non_minimum_phase_names_field() {
        let text = MINIMAL.replace("c_ar = []", "c_ar = [1.5]");
        match parse_config(Some(&text), &flags(CommandName::Capacity)) {
            Err(CliError::Validation { field, .. }) => assert_eq!(field, "c_ar"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn policy_length_is_checked() {
        let mut f = flags(CommandName::Rate);
        f.d = Some(vec![0.0, 0.0]);
        match parse_config(Some(MINIMAL), &f) {
            Err(CliError::Validation { field, .. }) => assert_eq!(field, "d"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rate_example() {
        let mut f = flags(CommandName::Rate);
        f.d = Some(vec![0.0]);
        f.e = Some(1.0);
        let cfg = parse_config(Some(MINIMAL), &f).unwrap();
        let em = execute(&cfg).unwrap();
        let report: RateReport = serde_json::from_str(&em.body).unwrap();
        assert!((report.rate - 0.37870).abs() < 1e-4);
        assert!(!report.e_calibrated);
    }

    #[test]
    fn verify_without_config_uses_random_spec() {
        let mut f = flags(CommandName::Verify);
        f.seed = Some(9);
        let cfg = parse_config(None, &f).unwrap();
        assert_eq!(cfg.channel, random_spec(&mut GaussianStream::new(9), 3, 3, 4));
        assert!(parse_config(None, &flags(CommandName::Capacity)).is_err());
    }

    #[test]
    fn spec_hash_is_stable_hex() {
        let spec = ArmaNoiseSpec::white(1.0, 1, 1.0);
        let h = spec_hash(&spec);
        assert_eq!(h.len(), 64);
        assert_eq!(h, spec_hash(&spec.clone()));
        assert_ne!(h, spec_hash(&ArmaNoiseSpec::white(1.0, 2, 1.0)));
    }
}
