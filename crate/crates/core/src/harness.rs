//! Command-line pipeline: power flow, sensitivity heatmaps, Taylor estimates
//! under load scaling, and profile-driven phase balancing. Every command
//! writes header-first CSV with 17-significant-digit floats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Deserialize;
use thiserror::Error;

use crate::balancer::{self, control_values, BalancingProblem, ProfileRun};
use crate::feeder::{load_feeder, FeederError, FeederModel};
use crate::lp::dot;
use crate::metrics::{self, Metric};
use crate::phase::Phase;
use crate::powerflow::{self, PowerFlowError, SolveOptions, VoltageState};
use crate::sensitivity::{complex_sensitivities, ControlKind, SensitivityTensor};
use crate::unbalance_sensitivity::{metric_sensitivity_matrix, MetricSensitivities};

pub const DEFAULT_SCALES: [f64; 2] = [0.8, 1.2];
pub const DEFAULT_BETAS: [f64; 2] = [0.01, 0.02];
pub const OUT_ENV: &str = "PHASEBAL_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 1,
            CliError::Numerical(_) => 2,
        }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

impl From<FeederError> for CliError {
    fn from(e: FeederError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PowerFlowError> for CliError {
    fn from(e: PowerFlowError) -> Self {
        match e {
            PowerFlowError::InvalidInjection(_) => CliError::Input(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Powerflow,
    Sensitivities,
    Estimate,
    Balance,
}

#[derive(Debug, Parser)]
#[command(
    name = "phasebal",
    version,
    about = "Three-phase unbalance analysis and phase balancing"
)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Feeder JSON file.
    #[arg(long)]
    pub feeder: PathBuf,
    /// Metric(s) to report or balance; defaults to all three.
    #[arg(long = "metric")]
    pub metrics: Vec<Metric>,
    /// Flexibility fraction(s) for `balance`.
    #[arg(long = "beta")]
    pub betas: Vec<f64>,
    /// Load scaling factor(s) for `estimate`.
    #[arg(long = "scale")]
    pub scales: Vec<f64>,
    /// Profile CSV with columns `step,factor` for `balance`.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long, env = OUT_ENV, default_value = ".")]
    pub out: PathBuf,
    /// Power-flow mismatch tolerance (pu).
    #[arg(long = "tol")]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub feeder: PathBuf,
    pub metrics: Vec<Metric>,
    pub betas: Vec<f64>,
    pub scales: Vec<f64>,
    pub profile: Option<PathBuf>,
    pub out: PathBuf,
    pub options: SolveOptions,
}

impl RunConfig {
    /// Fill defaults and check the arguments the command needs.
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let mut options = SolveOptions::default();
        if let Some(tol) = cli.tolerance {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(CliError::Input(format!(
                    "--tol must be positive, got {tol}"
                )));
            }
            options.tolerance = tol;
        }
        if let Some(max_iter) = cli.max_iter {
            if max_iter == 0 {
                return Err(CliError::Input("--max-iter must be at least 1".into()));
            }
            options.max_iter = max_iter;
        }
        let mut metrics = cli.metrics;
        if metrics.is_empty() {
            metrics = Metric::ALL.to_vec();
        }
        metrics.dedup();
        let betas = if cli.betas.is_empty() {
            DEFAULT_BETAS.to_vec()
        } else {
            cli.betas
        };
        let scales = if cli.scales.is_empty() {
            DEFAULT_SCALES.to_vec()
        } else {
            cli.scales
        };
        let config = RunConfig {
            command: cli.command,
            feeder: cli.feeder,
            metrics,
            betas,
            scales,
            profile: cli.profile,
            out: cli.out,
            options,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.command {
            Command::Estimate => {
                if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                    return Err(CliError::Input(format!(
                        "--scale must be positive, got {s}"
                    )));
                }
            }
            Command::Balance => {
                if self.profile.is_none() {
                    return Err(CliError::Input("balance requires --profile".into()));
                }
                for &beta in &self.betas {
                    BalancingProblem::new(Metric::Vuf, beta)
                        .validate()
                        .map_err(|e| CliError::Input(e.to_string()))?;
                }
            }
            Command::Powerflow | Command::Sensitivities => {}
        }
        Ok(())
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match RunConfig::from_cli(cli).and_then(|config| run(&config)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("phasebal: {e}");
            e.exit_code()
        }
    }
}

pub fn run(config: &RunConfig) -> Result<(), CliError> {
    let model = load_feeder(&config.feeder)?;
    fs::create_dir_all(&config.out).map_err(|e| CliError::io(&config.out, e))?;
    match config.command {
        Command::Powerflow => cmd_powerflow(config, &model),
        Command::Sensitivities => cmd_sensitivities(config, &model),
        Command::Estimate => cmd_estimate(config, &model),
        Command::Balance => cmd_balance(config, &model),
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn nominal_state(
    config: &RunConfig,
    model: &FeederModel,
) -> Result<(powerflow::InjectionVector, VoltageState), CliError> {
    let inj = powerflow::injections_from_loads_uniform(model, 1.0);
    let state = powerflow::solve(model, &inj, &config.options)?;
    Ok((inj, state))
}

pub fn cmd_powerflow(config: &RunConfig, model: &FeederModel) -> Result<(), CliError> {
    let (inj, state) = nominal_state(config, model)?;
    let residual = powerflow::mismatch(model, &inj, &state.voltages);
    let rows: Vec<Vec<String>> = model
        .terminals()
        .iter()
        .enumerate()
        .map(|(t, term)| {
            let v = state.voltages[t];
            vec![
                term.bus.to_string(),
                term.phase.to_string(),
                fmt_f64(v.norm()),
                fmt_f64(v.arg().to_degrees()),
                fmt_f64(residual[t]),
                state.iterations.to_string(),
            ]
        })
        .collect();
    let path = config.out.join("powerflow.csv");
    write_csv(
        &path,
        &[
            "bus",
            "phase",
            "vmag_pu",
            "angle_deg",
            "residual",
            "iterations",
        ],
        &rows,
    )?;
    println!(
        "converged in {} iterations, max mismatch {:.3e}; wrote {}",
        state.iterations,
        state.max_residual,
        path.display()
    );
    Ok(())
}

/// File name of one heatmap panel.
pub fn heatmap_file_name(metric: Metric, kind: ControlKind, phase: Phase) -> String {
    format!("sens_{metric}_{kind}{phase}.csv")
}

/// Rows of one heatmap panel: observed three-phase buses against the
/// controls of one kind on one phase.
pub fn heatmap_rows(
    sens: &MetricSensitivities,
    kind: ControlKind,
    phase: Phase,
) -> (Vec<String>, Vec<Vec<String>>) {
    let cols: Vec<usize> = (0..sens.controls.len())
        .filter(|&c| sens.controls[c].kind == kind && sens.controls[c].phase == phase)
        .collect();
    let mut header = vec!["bus".to_string(), "case".to_string(), "status".to_string()];
    header.extend(cols.iter().map(|&c| sens.controls[c].bus.to_string()));
    let rows = sens
        .rows
        .iter()
        .map(|row| {
            let case = row.case.map(|c| c.to_string()).unwrap_or_default();
            let mut out = vec![row.bus.to_string(), case];
            match &row.values {
                Ok(values) => {
                    out.push(if row.kink { "kink" } else { "ok" }.to_string());
                    out.extend(cols.iter().map(|&c| fmt_f64(values[c])));
                }
                Err(reason) => {
                    out.push(format!("skipped: {reason}"));
                    out.extend(cols.iter().map(|_| String::new()));
                }
            }
            out
        })
        .collect();
    (header, rows)
}

fn voltage_heatmap(
    model: &FeederModel,
    sens: &SensitivityTensor,
    kind: ControlKind,
) -> (Vec<String>, Vec<Vec<String>>) {
    let cols: Vec<usize> = (0..sens.n_controls())
        .filter(|&c| sens.controls()[c].kind == kind)
        .collect();
    let mut header = vec!["bus".to_string(), "quantity".to_string()];
    header.extend(cols.iter().map(|&c| {
        let ctl = sens.controls()[c];
        format!("{}.{}", ctl.bus, ctl.phase)
    }));
    let mut rows = Vec::new();
    for (t, term) in model.terminals().iter().enumerate() {
        let mut row = vec![term.bus.to_string(), term.phase.to_string()];
        row.extend(cols.iter().map(|&c| fmt_f64(sens.magnitude()[(t, c)])));
        rows.push(row);
    }
    for (r, &(bus, pair)) in sens.line_rows().iter().enumerate() {
        let mut row = vec![bus.to_string(), pair.to_string()];
        row.extend(cols.iter().map(|&c| fmt_f64(sens.line_magnitude()[(r, c)])));
        rows.push(row);
    }
    (header, rows)
}

pub fn cmd_sensitivities(config: &RunConfig, model: &FeederModel) -> Result<(), CliError> {
    let (_, state) = nominal_state(config, model)?;
    let sens =
        complex_sensitivities(model, &state).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut written = 0;
    for &metric in &config.metrics {
        let matrix = metric_sensitivity_matrix(model, &state, &sens, metric);
        for kind in ControlKind::ALL {
            for phase in Phase::ALL {
                let (header, rows) = heatmap_rows(&matrix, kind, phase);
                let header: Vec<&str> = header.iter().map(String::as_str).collect();
                write_csv(
                    &config.out.join(heatmap_file_name(metric, kind, phase)),
                    &header,
                    &rows,
                )?;
                written += 1;
            }
        }
    }
    for kind in ControlKind::ALL {
        let (header, rows) = voltage_heatmap(model, &sens, kind);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(
            &config.out.join(format!("sens_vmag_{kind}.csv")),
            &header,
            &rows,
        )?;
        written += 1;
    }
    println!(
        "wrote {written} sensitivity files to {}",
        config.out.display()
    );
    Ok(())
}

/// Exact versus first-order metric value at one bus under uniform load scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub scale: f64,
    pub bus: i64,
    pub metric: Metric,
    /// `(truth, estimate)`, or the reason the bus has no estimate.
    pub values: Result<(f64, f64), String>,
}

impl EstimateRow {
    pub fn abs_error(&self) -> Option<f64> {
        self.values.as_ref().ok().map(|(t, e)| (e - t).abs())
    }

    pub fn rel_error(&self) -> Option<f64> {
        self.values.as_ref().ok().map(|(t, e)| {
            if *t == 0.0 {
                (e - t).abs()
            } else {
                (e - t).abs() / t.abs()
            }
        })
    }
}

/// Linearize every metric at nominal load and compare the Taylor prediction
/// for each uniform load scaling with the exact power-flow value.
/// Rows are ordered by scale (as given), then bus id, then metric.
pub fn estimate(
    model: &FeederModel,
    options: &SolveOptions,
    metrics: &[Metric],
    scales: &[f64],
) -> Result<Vec<EstimateRow>, CliError> {
    let network = powerflow::ReducedNetwork::new(model)?;
    let base_inj = powerflow::injections_from_loads_uniform(model, 1.0);
    let base_state = powerflow::solve_with(model, &network, &base_inj, options)?;
    let base_report =
        metrics::report(model, &base_state).map_err(|e| CliError::Numerical(e.to_string()))?;
    let sens = complex_sensitivities(model, &base_state)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let matrices: Vec<MetricSensitivities> = metrics
        .iter()
        .map(|&m| metric_sensitivity_matrix(model, &base_state, &sens, m))
        .collect();
    let x_hat = control_values(&base_inj);

    let mut rows = Vec::new();
    for &scale in scales {
        let inj = powerflow::injections_from_loads_uniform(model, scale);
        let state = powerflow::solve_with(model, &network, &inj, options)?;
        let report =
            metrics::report(model, &state).map_err(|e| CliError::Numerical(e.to_string()))?;
        let dx: Vec<f64> = x_hat.iter().map(|x| (scale - 1.0) * x).collect();
        for base_bus in &base_report.buses {
            let truth_bus = report.get(base_bus.bus).expect("same bus set");
            for (&metric, matrix) in metrics.iter().zip(&matrices) {
                let row = matrix.row(base_bus.bus).expect("three-phase bus row");
                let values = match &row.values {
                    Ok(g) => Ok((
                        truth_bus.value(metric),
                        base_bus.value(metric) + dot(g, &dx),
                    )),
                    Err(reason) => Err(reason.clone()),
                };
                rows.push(EstimateRow {
                    scale,
                    bus: base_bus.bus,
                    metric,
                    values,
                });
            }
        }
    }
    Ok(rows)
}

pub fn cmd_estimate(config: &RunConfig, model: &FeederModel) -> Result<(), CliError> {
    let rows = estimate(model, &config.options, &config.metrics, &config.scales)?;
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut out = vec![r.scale.to_string(), r.bus.to_string(), r.metric.to_string()];
            match &r.values {
                Ok((truth, est)) => {
                    out.extend([
                        fmt_f64(*truth),
                        fmt_f64(*est),
                        fmt_f64(r.abs_error().unwrap()),
                        fmt_f64(r.rel_error().unwrap()),
                        "ok".to_string(),
                    ]);
                }
                Err(reason) => {
                    out.extend([String::new(), String::new(), String::new(), String::new()]);
                    out.push(format!("skipped: {reason}"));
                }
            }
            out
        })
        .collect();
    let path = config.out.join("estimate.csv");
    write_csv(
        &path,
        &[
            "scale",
            "bus",
            "metric",
            "true",
            "estimate",
            "abs_error",
            "rel_error",
            "status",
        ],
        &records,
    )?;
    println!(
        "wrote {} estimate rows to {}",
        records.len(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ProfileRecord {
    step: usize,
    factor: f64,
}

/// Read a `step,factor` profile CSV; returns the factors in file order.
pub fn read_profile(path: &Path) -> Result<Vec<f64>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut factors = Vec::new();
    for (i, record) in reader.deserialize::<ProfileRecord>().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if !(record.factor.is_finite() && record.factor > 0.0) {
            return Err(CliError::Input(format!(
                "{}: step {} has invalid factor {}",
                path.display(),
                record.step,
                record.factor
            )));
        }
        if record.step != i {
            return Err(CliError::Input(format!(
                "{}: expected step {i}, found {}",
                path.display(),
                record.step
            )));
        }
        factors.push(record.factor);
    }
    if factors.is_empty() {
        return Err(CliError::Input(format!(
            "{}: profile has no steps",
            path.display()
        )));
    }
    Ok(factors)
}

pub fn balance_file_name(metric: Metric, beta: f64) -> String {
    format!("balance_{metric}_beta{beta}.csv")
}

fn profile_rows(run: &ProfileRun) -> Vec<Vec<String>> {
    run.steps
        .iter()
        .map(|s| {
            vec![
                s.step.to_string(),
                fmt_f64(s.factor),
                fmt_f64(s.base),
                fmt_f64(s.predicted),
                fmt_f64(s.realized),
                s.status
                    .map(|st| st.as_str().to_string())
                    .unwrap_or_else(|| "error".into()),
                s.error.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

pub fn cmd_balance(config: &RunConfig, model: &FeederModel) -> Result<(), CliError> {
    let profile = read_profile(config.profile.as_deref().expect("validated"))?;
    let mut summary = Vec::new();
    for &metric in &config.metrics {
        for &beta in &config.betas {
            let prob = BalancingProblem::new(metric, beta);
            let run = balancer::run_profile(model, &prob, &profile, &config.options);
            write_csv(
                &config.out.join(balance_file_name(metric, beta)),
                &[
                    "step",
                    "factor",
                    "base",
                    "predicted",
                    "realized",
                    "status",
                    "error",
                ],
                &profile_rows(&run),
            )?;
            summary.push(run);
        }
    }
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|r| {
            vec![
                r.metric.to_string(),
                r.beta.to_string(),
                fmt_f64(r.base_total()),
                fmt_f64(r.predicted_total()),
                fmt_f64(r.realized_total()),
                fmt_f64(r.reduction_percent()),
                r.steps
                    .iter()
                    .filter(|s| s.error.is_some())
                    .count()
                    .to_string(),
            ]
        })
        .collect();
    write_csv(
        &config.out.join("summary.csv"),
        &[
            "metric",
            "beta",
            "base_total",
            "predicted_total",
            "realized_total",
            "reduction_pct",
            "failed_steps",
        ],
        &rows,
    )?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(
        stdout,
        "{:<6} {:>6} {:>14} {:>14} {:>10}",
        "metric", "beta", "base", "realized", "change"
    );
    for r in &summary {
        let _ = writeln!(
            stdout,
            "{:<6} {:>6} {:>14.6} {:>14.6} {:>9.2}%",
            r.metric.to_string(),
            r.beta,
            r.base_total(),
            r.realized_total(),
            r.reduction_percent()
        );
    }
    Ok(())
}
