//! Analytic sensitivities of VUF, PVUR and LVUR with respect to every control
//! variable, built on the complex-voltage sensitivities.
//!
//! VUF uses the quotient rule on `|v-| / |v+|`, with the sequence-component
//! derivatives obtained by applying the symmetrical-component transform to
//! the phase-voltage derivatives. PVUR and LVUR are differentiated inside the
//! case region active at the operating point:
//!
//! ```text
//! d/dx |N_k| / S = (S * sgn(N_k) * dN_k - |N_k| * dS) / S^2
//! N_k = 2 m_k - m_{k+1} - m_{k+2},  S = m_a + m_b + m_c
//! ```
//!
//! where `m` are phase (PVUR) or line (LVUR) magnitudes and `sgn(0) = +1`.

use std::fmt;

use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::metrics::{
    self, case_numerators, is_kink, line_magnitudes, to_sequence, Metric, SEQ_EPSILON,
};
use crate::phase::{LinePair, Phase};
use crate::powerflow::{self, InjectionVector, PowerFlowError, SolveOptions, VoltageState};
use crate::sensitivity::{
    complex_sensitivities, magnitude_derivative, ControlVariable, SensitivityError,
    SensitivityTensor,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnbalanceSensitivityError {
    #[error("degenerate point at bus {bus}: {reason}")]
    Degenerate { bus: i64, reason: String },
    #[error("bus {0} is not a three-phase bus")]
    NotThreePhase(i64),
    #[error(transparent)]
    Voltage(#[from] SensitivityError),
}

/// Case label frozen at the linearization point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseLabel {
    Phase(Phase),
    Pair(LinePair),
}

impl fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaseLabel::Phase(p) => write!(f, "{p}"),
            CaseLabel::Pair(p) => write!(f, "{p}"),
        }
    }
}

/// Sensitivity of a piecewise metric together with the case it was taken in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseSensitivity {
    pub value: f64,
    pub case: CaseLabel,
    /// Another case deviation ties the active one within the kink tolerance.
    pub kink: bool,
}

fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Derivative of `|N_case| / S` given magnitudes `m` and their derivatives `dm`.
pub fn case_quotient_derivative(m: [f64; 3], dm: [f64; 3], case: usize) -> f64 {
    let s = m[0] + m[1] + m[2];
    let ds = dm[0] + dm[1] + dm[2];
    let n = case_numerators(m)[case];
    let dn = case_numerators(dm)[case];
    (s * sgn(n) * dn - n.abs() * ds) / (s * s)
}

/// Active case of a magnitude triple, ties resolved to the lowest index.
fn active_case(m: [f64; 3]) -> usize {
    metrics::max_deviation_ratio(m).1
}

fn three_phase(
    model: &FeederModel,
    state: &VoltageState,
    bus: i64,
) -> Result<([usize; 3], [Complex64; 3]), UnbalanceSensitivityError> {
    let mut idx = [0; 3];
    for p in Phase::ALL {
        idx[p.index()] = model
            .terminal_index(bus, p)
            .ok_or(UnbalanceSensitivityError::NotThreePhase(bus))?;
    }
    Ok((idx, idx.map(|t| state.voltages[t])))
}

/// Quotient-rule VUF derivative from phase voltages and their derivatives.
pub fn vuf_derivative(
    bus: i64,
    v: [Complex64; 3],
    dv: [Complex64; 3],
) -> Result<f64, UnbalanceSensitivityError> {
    let seq = to_sequence(v[0], v[1], v[2]);
    let dseq = to_sequence(dv[0], dv[1], dv[2]);
    let pos = seq.positive.norm();
    let neg = seq.negative.norm();
    if !(pos > SEQ_EPSILON) {
        return Err(UnbalanceSensitivityError::Degenerate {
            bus,
            reason: format!("vanishing positive sequence (|v+| = {pos:.3e})"),
        });
    }
    if !(neg > SEQ_EPSILON) {
        return Err(UnbalanceSensitivityError::Degenerate {
            bus,
            reason: format!("balanced point, VUF not differentiable (|v-| = {neg:.3e})"),
        });
    }
    let dpos = magnitude_derivative(seq.positive, dseq.positive)?;
    let dneg = magnitude_derivative(seq.negative, dseq.negative)?;
    Ok((pos * dneg - neg * dpos) / (pos * pos))
}

pub fn vuf_sensitivity(
    model: &FeederModel,
    state: &VoltageState,
    sens: &SensitivityTensor,
    bus: i64,
    control: usize,
) -> Result<f64, UnbalanceSensitivityError> {
    let (idx, v) = three_phase(model, state, bus)?;
    vuf_derivative(bus, v, idx.map(|t| sens.dv(t, control)))
}

pub fn pvur_sensitivity(
    model: &FeederModel,
    state: &VoltageState,
    sens: &SensitivityTensor,
    bus: i64,
    control: usize,
) -> Result<CaseSensitivity, UnbalanceSensitivityError> {
    let (idx, _) = three_phase(model, state, bus)?;
    let m = idx.map(|t| state.voltages[t].norm());
    let dm = idx.map(|t| sens.magnitude()[(t, control)]);
    let case = active_case(m);
    Ok(CaseSensitivity {
        value: case_quotient_derivative(m, dm, case),
        case: CaseLabel::Phase(Phase::ALL[case]),
        kink: is_kink(m),
    })
}

pub fn lvur_sensitivity(
    model: &FeederModel,
    state: &VoltageState,
    sens: &SensitivityTensor,
    bus: i64,
    control: usize,
) -> Result<CaseSensitivity, UnbalanceSensitivityError> {
    let (_, v) = three_phase(model, state, bus)?;
    let m = line_magnitudes(&v);
    let mut dm = [0.0; 3];
    for pair in LinePair::ALL {
        let row = sens
            .line_row_index(bus, pair)
            .ok_or(UnbalanceSensitivityError::NotThreePhase(bus))?;
        dm[pair.index()] = sens.line_magnitude()[(row, control)];
    }
    let case = active_case(m);
    Ok(CaseSensitivity {
        value: case_quotient_derivative(m, dm, case),
        case: CaseLabel::Pair(LinePair::ALL[case]),
        kink: is_kink(m),
    })
}

/// Sensitivities of one metric at one bus against every control.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub bus: i64,
    pub case: Option<CaseLabel>,
    pub kink: bool,
    /// One entry per control, or the reason the bus was skipped.
    pub values: Result<Vec<f64>, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSensitivities {
    pub metric: Metric,
    pub controls: Vec<ControlVariable>,
    /// One row per three-phase bus, in id order.
    pub rows: Vec<MetricRow>,
}

impl MetricSensitivities {
    pub fn row(&self, bus: i64) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.bus == bus)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.controls.len())
    }
}

/// Full (three-phase bus x control) sensitivity matrix for `metric`.
/// Degenerate buses are kept with a recorded reason instead of failing.
pub fn metric_sensitivity_matrix(
    model: &FeederModel,
    state: &VoltageState,
    sens: &SensitivityTensor,
    metric: Metric,
) -> MetricSensitivities {
    let n = sens.n_controls();
    let rows = model
        .three_phase_buses()
        .map(|bus| {
            let bus = bus.id;
            let (case, kink) = match metric {
                Metric::Vuf => (None, false),
                Metric::Pvur => {
                    let probe = pvur_sensitivity(model, state, sens, bus, 0);
                    probe
                        .map(|c| (Some(c.case), c.kink))
                        .unwrap_or((None, false))
                }
                Metric::Lvur => {
                    let probe = lvur_sensitivity(model, state, sens, bus, 0);
                    probe
                        .map(|c| (Some(c.case), c.kink))
                        .unwrap_or((None, false))
                }
            };
            let values: Result<Vec<f64>, UnbalanceSensitivityError> = (0..n)
                .map(|c| match metric {
                    Metric::Vuf => vuf_sensitivity(model, state, sens, bus, c),
                    Metric::Pvur => pvur_sensitivity(model, state, sens, bus, c).map(|s| s.value),
                    Metric::Lvur => lvur_sensitivity(model, state, sens, bus, c).map(|s| s.value),
                })
                .collect();
            MetricRow {
                bus,
                case,
                kink,
                values: values.map_err(|e| e.to_string()),
            }
        })
        .collect();
    MetricSensitivities {
        metric,
        controls: sens.controls().to_vec(),
        rows,
    }
}

/// One point of an injection sweep: sensitivities of `metric` at the observed
/// buses with respect to one control, with the active case labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub factor: f64,
    pub values: Vec<(i64, Result<f64, String>, Option<CaseLabel>)>,
}

/// Which parts of the swept injection are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepScaling {
    pub active: bool,
    pub reactive: bool,
}

/// Scale the injection at non-slack slot `slot` by each factor (active and/or
/// reactive part), re-solve, and record the metric sensitivity of `buses`
/// with respect to control column `control`.
#[allow(clippy::too_many_arguments)]
pub fn injection_sweep(
    model: &FeederModel,
    base: &InjectionVector,
    slot: usize,
    scaling: SweepScaling,
    factors: &[f64],
    metric: Metric,
    buses: &[i64],
    control: usize,
    options: &SolveOptions,
) -> Result<Vec<SweepPoint>, PowerFlowError> {
    let network = powerflow::ReducedNetwork::new(model)?;
    let mut out = Vec::with_capacity(factors.len());
    for &factor in factors {
        let mut inj = base.clone();
        let s = base.0[slot];
        let re = if scaling.active { s.re * factor } else { s.re };
        let im = if scaling.reactive {
            s.im * factor
        } else {
            s.im
        };
        inj.0[slot] = Complex64::new(re, im);
        let state = powerflow::solve_with(model, &network, &inj, options)?;
        let values = match complex_sensitivities(model, &state) {
            Ok(sens) => buses
                .iter()
                .map(|&bus| {
                    let (value, case) = match metric {
                        Metric::Vuf => (vuf_sensitivity(model, &state, &sens, bus, control), None),
                        Metric::Pvur => {
                            match pvur_sensitivity(model, &state, &sens, bus, control) {
                                Ok(c) => (Ok(c.value), Some(c.case)),
                                Err(e) => (Err(e), None),
                            }
                        }
                        Metric::Lvur => {
                            match lvur_sensitivity(model, &state, &sens, bus, control) {
                                Ok(c) => (Ok(c.value), Some(c.case)),
                                Err(e) => (Err(e), None),
                            }
                        }
                    };
                    (bus, value.map_err(|e| e.to_string()), case)
                })
                .collect(),
            Err(e) => buses
                .iter()
                .map(|&bus| (bus, Err(e.to_string()), None))
                .collect(),
        };
        out.push(SweepPoint { factor, values });
    }
    Ok(out)
}
