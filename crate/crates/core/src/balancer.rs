//! Successive-linearization phase balancing.
//!
//! Each step linearizes the chosen unbalance metric and the voltage
//! magnitudes around the measured operating point, solves an LP over
//! per-phase injection deviations that keep each bus's net injection fixed,
//! actuates the result and re-runs the exact power flow.

use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::lp::{dot, solve_elastic, DenseSimplex, LinearProgram, LpSolver, LpStatus};
use crate::metrics::{self, Metric, MetricError, UnbalanceReport};
use crate::powerflow::{self, InjectionVector, PowerFlowError, SolveOptions, VoltageState};
use crate::sensitivity::{
    complex_sensitivities, ControlKind, ControlVariable, SensitivityError, SensitivityTensor,
};
use crate::unbalance_sensitivity::{metric_sensitivity_matrix, CaseLabel};

pub const DEFAULT_METRIC_CAP: f64 = 0.02;
pub const DEFAULT_V_LO: f64 = 0.95;
pub const DEFAULT_V_HI: f64 = 1.05;
pub const MAX_BETA: f64 = 0.05;
/// Penalty per unit of slack on the metric cap when the base point violates it.
pub const CAP_SLACK_PENALTY: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BalancerError {
    #[error("invalid balancing problem: {0}")]
    InvalidProblem(String),
    #[error("every three-phase bus is degenerate for {0}")]
    AllDegenerate(Metric),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("power flow failed: {0}")]
    PowerFlow(#[from] PowerFlowError),
    #[error("power flow failed after actuation: {source}")]
    Actuation {
        source: PowerFlowError,
        /// Full deviation vector (control order) that was applied.
        dx: Vec<f64>,
    },
}

/// First-order model of the metric and voltage magnitudes around `operating`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedModel {
    pub metric: Metric,
    pub controls: Vec<ControlVariable>,
    /// Injection value of each control at the operating point (pu).
    pub operating: Vec<f64>,
    /// Buses kept in the objective, with base values and gradients.
    pub buses: Vec<i64>,
    pub base_metric: Vec<f64>,
    pub metric_gradient: Vec<Vec<f64>>,
    pub case_labels: Vec<Option<CaseLabel>>,
    /// Buses dropped for this step, with reason.
    pub excluded: Vec<(i64, String)>,
    /// Non-slack terminal indices observed for the voltage limits.
    pub voltage_terminals: Vec<usize>,
    pub base_voltage: Vec<f64>,
    pub voltage_gradient: Vec<Vec<f64>>,
}

impl LinearizedModel {
    /// Predicted metric at each kept bus for a full deviation vector.
    pub fn predict_metric(&self, dx: &[f64]) -> Vec<f64> {
        self.base_metric
            .iter()
            .zip(&self.metric_gradient)
            .map(|(b, g)| b + dot(g, dx))
            .collect()
    }

    pub fn predict_voltage(&self, dx: &[f64]) -> Vec<f64> {
        self.base_voltage
            .iter()
            .zip(&self.voltage_gradient)
            .map(|(b, g)| b + dot(g, dx))
            .collect()
    }
}

/// Control values `[p_1..p_n, q_1..q_n]` of an injection vector.
pub fn control_values(inj: &InjectionVector) -> Vec<f64> {
    inj.0
        .iter()
        .map(|s| s.re)
        .chain(inj.0.iter().map(|s| s.im))
        .collect()
}

/// Apply a full deviation vector in control order to an injection vector.
pub fn apply_deviation(inj: &InjectionVector, dx: &[f64]) -> InjectionVector {
    let n = inj.len();
    assert_eq!(dx.len(), 2 * n);
    InjectionVector(
        inj.0
            .iter()
            .enumerate()
            .map(|(k, s)| s + Complex64::new(dx[k], dx[n + k]))
            .collect(),
    )
}

pub fn linearize(
    model: &FeederModel,
    state: &VoltageState,
    sens: &SensitivityTensor,
    inj: &InjectionVector,
    metric: Metric,
) -> Result<LinearizedModel, BalancerError> {
    let report = metrics::report(model, state)?;
    let matrix = metric_sensitivity_matrix(model, state, sens, metric);
    let mut buses = Vec::new();
    let mut base_metric = Vec::new();
    let mut metric_gradient = Vec::new();
    let mut case_labels = Vec::new();
    let mut excluded = Vec::new();
    for row in matrix.rows {
        match row.values {
            Ok(g) => {
                let base = report
                    .get(row.bus)
                    .expect("three-phase bus in report")
                    .value(metric);
                buses.push(row.bus);
                base_metric.push(base);
                metric_gradient.push(g);
                case_labels.push(row.case);
            }
            Err(reason) => excluded.push((row.bus, reason)),
        }
    }
    if buses.is_empty() {
        return Err(BalancerError::AllDegenerate(metric));
    }
    let voltage_terminals = model.non_slack_terminals();
    let base_voltage = voltage_terminals
        .iter()
        .map(|&t| state.voltages[t].norm())
        .collect();
    let voltage_gradient = voltage_terminals
        .iter()
        .map(|&t| sens.magnitude().row(t).iter().copied().collect())
        .collect();
    Ok(LinearizedModel {
        metric,
        controls: sens.controls().to_vec(),
        operating: control_values(inj),
        buses,
        base_metric,
        metric_gradient,
        case_labels,
        excluded,
        voltage_terminals,
        base_voltage,
        voltage_gradient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlSelection {
    P,
    Q,
    Both,
}

impl ControlSelection {
    pub fn includes(self, kind: ControlKind) -> bool {
        matches!(
            (self, kind),
            (ControlSelection::Both, _)
                | (ControlSelection::P, ControlKind::P)
                | (ControlSelection::Q, ControlKind::Q)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancingProblem {
    pub metric: Metric,
    /// Per-control flexibility as a fraction of the operating injection.
    pub beta: f64,
    pub metric_cap: f64,
    pub v_lo: f64,
    pub v_hi: f64,
    /// Buses whose phases may be rebalanced; `None` means every non-slack bus.
    pub flexible_buses: Option<Vec<i64>>,
    pub kinds: ControlSelection,
}

impl BalancingProblem {
    pub fn new(metric: Metric, beta: f64) -> Self {
        BalancingProblem {
            metric,
            beta,
            metric_cap: DEFAULT_METRIC_CAP,
            v_lo: DEFAULT_V_LO,
            v_hi: DEFAULT_V_HI,
            flexible_buses: None,
            kinds: ControlSelection::P,
        }
    }

    pub fn validate(&self) -> Result<(), BalancerError> {
        if !(0.0..=MAX_BETA).contains(&self.beta) {
            return Err(BalancerError::InvalidProblem(format!(
                "beta must lie in [0, {MAX_BETA}], got {}",
                self.beta
            )));
        }
        if !(self.v_lo < self.v_hi) {
            return Err(BalancerError::InvalidProblem(format!(
                "voltage bounds must satisfy v_lo < v_hi, got {} and {}",
                self.v_lo, self.v_hi
            )));
        }
        if !(self.metric_cap > 0.0) {
            return Err(BalancerError::InvalidProblem(format!(
                "metric cap must be positive, got {}",
                self.metric_cap
            )));
        }
        Ok(())
    }

    fn is_flexible(&self, control: &ControlVariable) -> bool {
        self.kinds.includes(control.kind)
            && self
                .flexible_buses
                .as_ref()
                .is_none_or(|buses| buses.contains(&control.bus))
    }
}

/// LP in the deviation variables of the flexible controls.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingLp {
    pub lp: LinearProgram,
    /// Control column of each LP variable.
    pub vars: Vec<usize>,
    pub n_controls: usize,
    /// Index ranges of the row families inside `lp.a_ub`.
    pub metric_cap_rows: std::ops::Range<usize>,
    pub metric_floor_rows: std::ops::Range<usize>,
    pub voltage_rows: std::ops::Range<usize>,
}

impl BalancingLp {
    /// Scatter LP variables into a full deviation vector in control order.
    pub fn full_deviation(&self, x: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_controls];
        for (&c, &v) in self.vars.iter().zip(x) {
            dx[c] = v;
        }
        dx
    }
}

pub fn build_lp(lin: &LinearizedModel, prob: &BalancingProblem) -> BalancingLp {
    let vars: Vec<usize> = (0..lin.controls.len())
        .filter(|&c| prob.is_flexible(&lin.controls[c]))
        .collect();
    let restrict = |g: &[f64]| -> Vec<f64> { vars.iter().map(|&c| g[c]).collect() };

    let mut cost = vec![0.0; vars.len()];
    for g in &lin.metric_gradient {
        for (cj, gj) in cost.iter_mut().zip(restrict(g)) {
            *cj += gj;
        }
    }
    let constant = lin.base_metric.iter().sum();

    let mut a_ub = Vec::new();
    let mut b_ub = Vec::new();
    for (g, base) in lin.metric_gradient.iter().zip(&lin.base_metric) {
        a_ub.push(restrict(g));
        b_ub.push(prob.metric_cap - base);
    }
    let metric_cap_rows = 0..a_ub.len();
    for (g, base) in lin.metric_gradient.iter().zip(&lin.base_metric) {
        a_ub.push(restrict(g).into_iter().map(|v| -v).collect());
        b_ub.push(*base);
    }
    let metric_floor_rows = metric_cap_rows.end..a_ub.len();
    for (g, base) in lin.voltage_gradient.iter().zip(&lin.base_voltage) {
        a_ub.push(restrict(g));
        b_ub.push(prob.v_hi - base);
        a_ub.push(restrict(g).into_iter().map(|v| -v).collect());
        b_ub.push(base - prob.v_lo);
    }
    let voltage_rows = metric_floor_rows.end..a_ub.len();

    let width: Vec<f64> = vars
        .iter()
        .map(|&c| prob.beta * lin.operating[c].abs())
        .collect();
    let lower = width.iter().map(|w| -w).collect();
    let upper = width.clone();

    // Net deviation per (bus, kind) is zero.
    let mut groups: Vec<((i64, ControlKind), Vec<usize>)> = Vec::new();
    for (j, &c) in vars.iter().enumerate() {
        let key = (lin.controls[c].bus, lin.controls[c].kind);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(j),
            None => groups.push((key, vec![j])),
        }
    }
    let mut a_eq = Vec::with_capacity(groups.len());
    for (_, members) in &groups {
        let mut row = vec![0.0; vars.len()];
        for &j in members {
            row[j] = 1.0;
        }
        a_eq.push(row);
    }
    let b_eq = vec![0.0; a_eq.len()];

    BalancingLp {
        lp: LinearProgram {
            cost,
            constant,
            a_ub,
            b_ub,
            a_eq,
            b_eq,
            lower,
            upper,
            elastic_rows: metric_cap_rows.clone().collect(),
        },
        vars,
        n_controls: lin.controls.len(),
        metric_cap_rows,
        metric_floor_rows,
        voltage_rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionStatus {
    Optimal,
    /// The metric cap had to be relaxed with penalized slack.
    Relaxed,
    Infeasible,
}

impl DecisionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DecisionStatus::Optimal => "optimal",
            DecisionStatus::Relaxed => "relaxed",
            DecisionStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancingDecision {
    /// Full deviation vector in control order (zero for inflexible controls).
    pub dx: Vec<f64>,
    /// Predicted metric sum over the buses kept in the objective.
    pub predicted_objective: f64,
    pub status: DecisionStatus,
    /// Slack on each metric-cap row when relaxed.
    pub slacks: Vec<f64>,
    pub lp_iterations: usize,
}

pub fn solve_lp(blp: &BalancingLp) -> BalancingDecision {
    solve_lp_with(&DenseSimplex::default(), blp)
}

pub fn solve_lp_with(solver: &dyn LpSolver, blp: &BalancingLp) -> BalancingDecision {
    let result = solve_elastic(solver, &blp.lp, CAP_SLACK_PENALTY);
    let sol = result.solution;
    match sol.status {
        LpStatus::Optimal => BalancingDecision {
            dx: blp.full_deviation(&sol.x),
            predicted_objective: sol.objective,
            status: if result.relaxed {
                DecisionStatus::Relaxed
            } else {
                DecisionStatus::Optimal
            },
            slacks: result.slacks,
            lp_iterations: sol.iterations,
        },
        LpStatus::Unbounded => unreachable!("box bounds make the balancing LP bounded"),
        LpStatus::Infeasible | LpStatus::IterationLimit => BalancingDecision {
            dx: vec![0.0; blp.n_controls],
            predicted_objective: blp.lp.constant,
            status: DecisionStatus::Infeasible,
            slacks: result.slacks,
            lp_iterations: sol.iterations,
        },
    }
}

#[derive(Debug, Clone)]
pub struct FeedbackOutcome {
    pub linearized: LinearizedModel,
    pub decision: BalancingDecision,
    /// Base metric sum over every three-phase bus.
    pub base_total: f64,
    /// Predicted sum over every three-phase bus (excluded buses at base value).
    pub predicted_total: f64,
    pub injections: InjectionVector,
    pub state: VoltageState,
    pub report: UnbalanceReport,
}

impl FeedbackOutcome {
    pub fn realized_total(&self) -> f64 {
        self.report.total(self.linearized.metric)
    }
}

/// One linearize / optimize / actuate / observe cycle at the operating point
/// `(inj, state)`. The realized state is the next step's operating point.
pub fn feedback_step(
    model: &FeederModel,
    inj: &InjectionVector,
    state: &VoltageState,
    prob: &BalancingProblem,
    options: &SolveOptions,
) -> Result<FeedbackOutcome, BalancerError> {
    prob.validate()?;
    let sens = complex_sensitivities(model, state)?;
    let lin = linearize(model, state, &sens, inj, prob.metric)?;
    let blp = build_lp(&lin, prob);
    let decision = solve_lp(&blp);

    let base_report = metrics::report(model, state)?;
    let predicted_kept = lin.predict_metric(&decision.dx);
    let base_total = base_report.total(prob.metric);
    let predicted_total = base_report
        .buses
        .iter()
        .map(|b| match lin.buses.iter().position(|&id| id == b.bus) {
            Some(k) => predicted_kept[k],
            None => b.value(prob.metric),
        })
        .sum();

    let injections = apply_deviation(inj, &decision.dx);
    let realized = powerflow::solve(model, &injections, options).map_err(|source| {
        BalancerError::Actuation {
            source,
            dx: decision.dx.clone(),
        }
    })?;
    let report = metrics::report(model, &realized)?;
    Ok(FeedbackOutcome {
        linearized: lin,
        decision,
        base_total,
        predicted_total,
        injections,
        state: realized,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileStep {
    pub step: usize,
    pub factor: f64,
    pub base: f64,
    pub predicted: f64,
    pub realized: f64,
    pub status: Option<DecisionStatus>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRun {
    pub metric: Metric,
    pub beta: f64,
    pub steps: Vec<ProfileStep>,
}

impl ProfileRun {
    fn sum(&self, f: impl Fn(&ProfileStep) -> f64) -> f64 {
        self.steps.iter().filter(|s| s.error.is_none()).map(f).sum()
    }

    pub fn base_total(&self) -> f64 {
        self.sum(|s| s.base)
    }

    pub fn predicted_total(&self) -> f64 {
        self.sum(|s| s.predicted)
    }

    pub fn realized_total(&self) -> f64 {
        self.sum(|s| s.realized)
    }

    /// Percentage change of the realized total relative to the base total.
    pub fn reduction_percent(&self) -> f64 {
        let base = self.base_total();
        if base == 0.0 {
            0.0
        } else {
            100.0 * (self.realized_total() - base) / base
        }
    }
}

/// Run one feedback step per profile entry. At each step every load is
/// scaled by the step factor, the resulting state is measured, and the
/// balancer acts on it. Failed steps are recorded and skipped.
pub fn run_profile(
    model: &FeederModel,
    prob: &BalancingProblem,
    profile: &[f64],
    options: &SolveOptions,
) -> ProfileRun {
    run_profile_observed(model, prob, profile, options, &mut |_, _, _| {})
}

/// [`run_profile`] that also hands each successful step's operating
/// injections and outcome to `observer`.
pub fn run_profile_observed(
    model: &FeederModel,
    prob: &BalancingProblem,
    profile: &[f64],
    options: &SolveOptions,
    observer: &mut dyn FnMut(usize, &InjectionVector, &FeedbackOutcome),
) -> ProfileRun {
    let network = powerflow::ReducedNetwork::new(model);
    let steps = profile
        .iter()
        .enumerate()
        .map(|(step, &factor)| {
            let failed = |error: String| ProfileStep {
                step,
                factor,
                base: f64::NAN,
                predicted: f64::NAN,
                realized: f64::NAN,
                status: None,
                error: Some(error),
            };
            let network = match &network {
                Ok(n) => n,
                Err(e) => return failed(e.to_string()),
            };
            let inj = powerflow::injections_from_loads_uniform(model, factor);
            let state = match powerflow::solve_with(model, network, &inj, options) {
                Ok(s) => s,
                Err(e) => return failed(format!("base power flow: {e}")),
            };
            match feedback_step(model, &inj, &state, prob, options) {
                Ok(out) => {
                    observer(step, &inj, &out);
                    ProfileStep {
                        step,
                        factor,
                        base: out.base_total,
                        predicted: out.predicted_total,
                        realized: out.realized_total(),
                        status: Some(out.decision.status),
                        error: None,
                    }
                }
                Err(e) => failed(e.to_string()),
            }
        })
        .collect();
    ProfileRun {
        metric: prob.metric,
        beta: prob.beta,
        steps,
    }
}
