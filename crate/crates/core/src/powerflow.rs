//! Three-phase unbalanced power flow by fixed-point current injection on the
//! factorized reduced admittance matrix.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::phase::Phase;

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error(
        "power flow did not converge in {iterations} iterations (max mismatch {residual:.3e} pu)"
    )]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("reduced admittance matrix is singular")]
    Singular,
    #[error("invalid injection vector: {0}")]
    InvalidInjection(String),
}

/// Balanced slack reference voltage for a phase.
pub fn slack_reference(phase: Phase) -> Complex64 {
    match phase {
        Phase::A => Complex64::new(1.0, 0.0),
        Phase::B => Complex64::from_polar(1.0, -2.0 * PI / 3.0),
        Phase::C => Complex64::from_polar(1.0, 2.0 * PI / 3.0),
    }
}

/// Net complex power injection (pu) at every non-slack terminal, in the order
/// of [`FeederModel::non_slack_terminals`]. Loads are negative.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector(pub Vec<Complex64>);

impl InjectionVector {
    pub fn zeros(model: &FeederModel) -> Self {
        InjectionVector(vec![
            Complex64::new(0.0, 0.0);
            model.non_slack_terminals().len()
        ])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }
}

/// Net injection `-scale[k] * load[k]` for each non-slack terminal `k`.
pub fn injections_from_loads(model: &FeederModel, scale: &[f64]) -> InjectionVector {
    let loads = model.nominal_load_pu();
    let ns = model.non_slack_terminals();
    assert_eq!(
        scale.len(),
        ns.len(),
        "one multiplier per non-slack terminal"
    );
    InjectionVector(ns.iter().zip(scale).map(|(&t, &f)| -loads[t] * f).collect())
}

pub fn injections_from_loads_uniform(model: &FeederModel, scale: f64) -> InjectionVector {
    let n = model.non_slack_terminals().len();
    injections_from_loads(model, &vec![scale; n])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageState {
    /// Complex voltage per terminal (pu), slack terminals included.
    pub voltages: Vec<Complex64>,
    pub iterations: usize,
    pub max_residual: f64,
    /// Max mismatch at each visited iterate, starting with the flat start.
    pub residual_history: Vec<f64>,
}

impl VoltageState {
    pub fn voltage(&self, model: &FeederModel, bus: i64, phase: Phase) -> Option<Complex64> {
        model.terminal_index(bus, phase).map(|i| self.voltages[i])
    }
}

/// Power injected at every terminal, `v * conj(Y v)`.
pub fn terminal_power(model: &FeederModel, voltages: &[Complex64]) -> Vec<Complex64> {
    let v = DVector::from_column_slice(voltages);
    let current = model.admittance() * &v;
    v.iter()
        .zip(current.iter())
        .map(|(v, i)| v * i.conj())
        .collect()
}

/// Injections that reproduce `state` exactly, in non-slack terminal order.
pub fn implied_injections(model: &FeederModel, state: &VoltageState) -> InjectionVector {
    let s = terminal_power(model, &state.voltages);
    InjectionVector(model.non_slack_terminals().iter().map(|&t| s[t]).collect())
}

/// Per-terminal power mismatch magnitude; zero at slack terminals.
pub fn mismatch(model: &FeederModel, inj: &InjectionVector, voltages: &[Complex64]) -> Vec<f64> {
    let s = terminal_power(model, voltages);
    let mut out = vec![0.0; voltages.len()];
    for (k, &t) in model.non_slack_terminals().iter().enumerate() {
        out[t] = (inj.0[k] - s[t]).norm();
    }
    out
}

/// Slack-reduced partition of the admittance matrix, factorized once.
pub struct ReducedNetwork {
    non_slack: Vec<usize>,
    slack: Vec<usize>,
    y_nn: DMatrix<Complex64>,
    lu: LU<Complex64, Dyn, Dyn>,
    /// No-load voltage `-Ynn^{-1} Yns v_s`.
    no_load: DVector<Complex64>,
    slack_voltage: Vec<Complex64>,
}

impl ReducedNetwork {
    pub fn new(model: &FeederModel) -> Result<Self, PowerFlowError> {
        let y = model.admittance();
        let non_slack = model.non_slack_terminals();
        let slack = model.slack_terminals();
        let y_nn = y.select_rows(&non_slack).select_columns(&non_slack);
        let y_ns = y.select_rows(&non_slack).select_columns(&slack);
        let slack_voltage: Vec<Complex64> = slack
            .iter()
            .map(|&t| slack_reference(model.terminals()[t].phase))
            .collect();
        let lu = y_nn.clone().lu();
        if !lu.is_invertible() {
            return Err(PowerFlowError::Singular);
        }
        let rhs = -(y_ns * DVector::from_column_slice(&slack_voltage));
        let no_load = lu.solve(&rhs).ok_or(PowerFlowError::Singular)?;
        Ok(ReducedNetwork {
            non_slack,
            slack,
            y_nn,
            lu,
            no_load,
            slack_voltage,
        })
    }

    pub fn y_nn(&self) -> &DMatrix<Complex64> {
        &self.y_nn
    }

    pub fn non_slack(&self) -> &[usize] {
        &self.non_slack
    }

    fn assemble(&self, n_terminals: usize, v_n: &DVector<Complex64>) -> Vec<Complex64> {
        let mut v = vec![Complex64::new(0.0, 0.0); n_terminals];
        for (k, &t) in self.slack.iter().enumerate() {
            v[t] = self.slack_voltage[k];
        }
        for (k, &t) in self.non_slack.iter().enumerate() {
            v[t] = v_n[k];
        }
        v
    }
}

fn validate_injections(model: &FeederModel, inj: &InjectionVector) -> Result<(), PowerFlowError> {
    let expected = model.non_slack_terminals().len();
    if inj.len() != expected {
        return Err(PowerFlowError::InvalidInjection(format!(
            "expected {expected} entries, got {}",
            inj.len()
        )));
    }
    if let Some(k) = inj
        .0
        .iter()
        .position(|s| !s.re.is_finite() || !s.im.is_finite())
    {
        return Err(PowerFlowError::InvalidInjection(format!(
            "entry {k} is not finite"
        )));
    }
    Ok(())
}

pub fn solve(
    model: &FeederModel,
    inj: &InjectionVector,
    options: &SolveOptions,
) -> Result<VoltageState, PowerFlowError> {
    let network = ReducedNetwork::new(model)?;
    solve_with(model, &network, inj, options)
}

/// Solve reusing an existing factorization of the reduced network.
pub fn solve_with(
    model: &FeederModel,
    network: &ReducedNetwork,
    inj: &InjectionVector,
    options: &SolveOptions,
) -> Result<VoltageState, PowerFlowError> {
    validate_injections(model, inj)?;
    let n = model.n_terminals();
    let s = DVector::from_column_slice(&inj.0);

    // Flat start: every terminal at the slack reference of its phase.
    let mut v_n = DVector::from_iterator(
        network.non_slack.len(),
        network
            .non_slack
            .iter()
            .map(|&t| slack_reference(model.terminals()[t].phase)),
    );
    let mut history = Vec::new();
    loop {
        let v = network.assemble(n, &v_n);
        let residual = mismatch(model, inj, &v).into_iter().fold(0.0, f64::max);
        history.push(residual);
        let iterations = history.len() - 1;
        if residual <= options.tolerance {
            return Ok(VoltageState {
                voltages: v,
                iterations,
                max_residual: residual,
                residual_history: history,
            });
        }
        if iterations >= options.max_iter || !residual.is_finite() {
            return Err(PowerFlowError::NonConvergence {
                iterations,
                residual,
            });
        }
        let current = s.zip_map(&v_n, |s, v| (s / v).conj());
        let correction = network.lu.solve(&current).ok_or(PowerFlowError::Singular)?;
        v_n = &network.no_load + correction;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{BusKind, BusRecord, FeederFile, LoadRecord, SegmentRecord};

    fn decoupled_two_bus(z_ohm: [f64; 2], loads: &[(&str, f64, f64)]) -> FeederModel {
        // s_base 3 kVA, 1 kV: z_base = 1000 ohm, phase power base 1 kVA.
        let z = (0..3)
            .map(|r| {
                (0..3)
                    .map(|c| if r == c { z_ohm } else { [0.0, 0.0] })
                    .collect()
            })
            .collect();
        FeederFile {
            s_base_kva: 3.0,
            buses: vec![
                BusRecord {
                    id: 1,
                    kind: BusKind::Slack,
                    phases: "abc".into(),
                    base_kv: 1.0,
                },
                BusRecord {
                    id: 2,
                    kind: BusKind::Load,
                    phases: "abc".into(),
                    base_kv: 1.0,
                },
            ],
            segments: vec![SegmentRecord {
                from: 1,
                to: 2,
                z_ohm: z,
                y_shunt_s: None,
            }],
            loads: loads
                .iter()
                .map(|(ph, p, q)| LoadRecord {
                    bus: 2,
                    phase: ph.to_string(),
                    p_kw: *p,
                    q_kvar: *q,
                })
                .collect(),
        }
        .into_model()
        .unwrap()
    }

    #[test]
    fn zero_injection_gives_slack_voltages() {
        let model = decoupled_two_bus([10.0, 10.0], &[]);
        let state = solve(
            &model,
            &InjectionVector::zeros(&model),
            &SolveOptions::default(),
        )
        .unwrap();
        for (t, v) in model.terminals().iter().zip(&state.voltages) {
            assert!((v - slack_reference(t.phase)).norm() < 1e-14);
        }
    }

    /// Scalar oracle for a slack (v0 = 1) feeding one load terminal through z:
    /// s = v (v - 1)^* / z^*  gives  v^* = u - z s^*  with u = |v|^2, and
    /// u solves u^2 - (1 + 2 Re(z s^*)) u + |z s|^2 = 0 (high-voltage root).
    fn two_bus_oracle(z: Complex64, s: Complex64) -> Complex64 {
        let a = 2.0 * (z * s.conj()).re;
        let b = (z * s).norm_sqr();
        let disc = (1.0 + a).powi(2) - 4.0 * b;
        let u = ((1.0 + a) + disc.sqrt()) / 2.0;
        let v = u - z.conj() * s;
        assert!((v.norm_sqr() - u).abs() < 1e-12);
        v
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // z = 0.01 + 0.01j pu (z_base 1000 ohm), load 0.1 + 0.05j pu (base 1 kVA/phase).
        let model = decoupled_two_bus([10.0, 10.0], &[("a", 0.1, 0.05)]);
        let inj = injections_from_loads_uniform(&model, 1.0);
        let state = solve(&model, &inj, &SolveOptions::default()).unwrap();
        let expected = two_bus_oracle(Complex64::new(0.01, 0.01), Complex64::new(-0.1, -0.05));
        let got = state.voltage(&model, 2, Phase::A).unwrap();
        assert!((got - expected).norm() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn injection_scaling() {
        let model = decoupled_two_bus([10.0, 10.0], &[("a", 0.1, 0.05), ("c", 0.3, 0.0)]);
        let nominal = injections_from_loads_uniform(&model, 1.0);
        assert_eq!(nominal.0[0], Complex64::new(-0.1, -0.05));
        assert_eq!(nominal.0[1], Complex64::new(0.0, 0.0));
        for f in [0.8, 1.2] {
            let scaled = injections_from_loads_uniform(&model, f);
            for (a, b) in scaled.0.iter().zip(&nominal.0) {
                assert_eq!(*a, b * f);
            }
        }
    }

    #[test]
    fn rejects_bad_injections() {
        let model = decoupled_two_bus([10.0, 10.0], &[]);
        let mut inj = InjectionVector::zeros(&model);
        inj.0[1] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(
            solve(&model, &inj, &SolveOptions::default()),
            Err(PowerFlowError::InvalidInjection(_))
        ));
        let short = InjectionVector(vec![]);
        assert!(solve(&model, &short, &SolveOptions::default()).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        // Far beyond the loadability limit of the line.
        let model = decoupled_two_bus([100.0, 100.0], &[("a", 50.0, 0.0)]);
        let inj = injections_from_loads_uniform(&model, 1.0);
        match solve(&model, &inj, &SolveOptions::default()) {
            Err(PowerFlowError::NonConvergence {
                iterations,
                residual,
            }) => {
                assert!(iterations > 0);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
