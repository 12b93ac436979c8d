//! Complex-voltage sensitivities with respect to per-phase active and reactive
//! injections, plus the derived phase- and line-voltage magnitude
//! sensitivities.
//!
//! At a converged operating point every non-slack terminal satisfies
//! `s_k = v_k * conj((Y v)_k)`. Differentiating with respect to one control
//! `x` gives, for the non-slack block,
//!
//! ```text
//! conj(I_k) dv_k + v_k conj(sum_l Ynn[k,l] dv_l) = ds_k/dx
//! ```
//!
//! which is linear in `(Re dv, Im dv)` but not in `dv` alone. The real
//! `2n x 2n` system is factorized once and solved for all `2n` controls.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::phase::{LinePair, Phase};
use crate::powerflow::VoltageState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("linearized power-balance system is singular (pivot ratio estimate {condition:.3e})")]
    Singular { condition: f64 },
    #[error("degenerate operating point: {0}")]
    Degenerate(String),
    #[error("bus {bus} does not carry both phases of pair {pair}")]
    MissingPhase { bus: i64, pair: LinePair },
    #[error("unknown terminal {bus}.{phase}")]
    UnknownTerminal { bus: i64, phase: Phase },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ControlKind {
    P,
    Q,
}

impl ControlKind {
    pub const ALL: [ControlKind; 2] = [ControlKind::P, ControlKind::Q];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlKind::P => "p",
            ControlKind::Q => "q",
        }
    }

    /// Unit complex injection direction for this control.
    pub fn direction(self) -> Complex64 {
        match self {
            ControlKind::P => Complex64::new(1.0, 0.0),
            ControlKind::Q => Complex64::new(0.0, 1.0),
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Active or reactive injection at one non-slack terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ControlVariable {
    pub bus: i64,
    pub phase: Phase,
    pub kind: ControlKind,
}

impl fmt::Display for ControlVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.bus, self.phase, self.kind)
    }
}

/// Control ordering: all `p` controls in non-slack terminal order, then all
/// `q` controls in the same order. Control `k` of kind `p` and control
/// `k + n` of kind `q` act on the same injection slot `k`.
pub fn control_variables(model: &FeederModel) -> Vec<ControlVariable> {
    let ns = model.non_slack_terminals();
    ControlKind::ALL
        .iter()
        .flat_map(|&kind| {
            ns.iter().map(move |&t| {
                let term = model.terminals()[t];
                ControlVariable {
                    bus: term.bus,
                    phase: term.phase,
                    kind,
                }
            })
        })
        .collect()
}

/// `d|v|/dx = Re(conj(v) dv/dx) / |v|`.
pub fn magnitude_derivative(v: Complex64, dv: Complex64) -> Result<f64, SensitivityError> {
    let mag = v.norm();
    if !(mag > 0.0) {
        return Err(SensitivityError::Degenerate(
            "zero voltage magnitude".into(),
        ));
    }
    Ok((v.conj() * dv).re / mag)
}

#[derive(Debug, Clone)]
pub struct SensitivityTensor {
    controls: Vec<ControlVariable>,
    /// `dv/dx`, one row per terminal (slack rows zero), one column per control.
    complex: DMatrix<Complex64>,
    /// `d|v|/dx` per terminal.
    magnitude: DMatrix<f64>,
    /// Observed line pairs `(bus, pair)` where the bus carries both phases.
    line_rows: Vec<(i64, LinePair)>,
    line_magnitude: DMatrix<f64>,
}

impl SensitivityTensor {
    pub fn controls(&self) -> &[ControlVariable] {
        &self.controls
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn control_index(&self, control: &ControlVariable) -> Option<usize> {
        self.controls.iter().position(|c| c == control)
    }

    pub fn complex(&self) -> &DMatrix<Complex64> {
        &self.complex
    }

    pub fn magnitude(&self) -> &DMatrix<f64> {
        &self.magnitude
    }

    pub fn line_rows(&self) -> &[(i64, LinePair)] {
        &self.line_rows
    }

    pub fn line_magnitude(&self) -> &DMatrix<f64> {
        &self.line_magnitude
    }

    pub fn line_row_index(&self, bus: i64, pair: LinePair) -> Option<usize> {
        self.line_rows.iter().position(|&r| r == (bus, pair))
    }

    /// Complex `dv/dx` of one terminal with respect to control column `control`.
    pub fn dv(&self, terminal: usize, control: usize) -> Complex64 {
        self.complex[(terminal, control)]
    }
}

/// Solve the linearized nodal power balance for every control at once.
pub fn complex_sensitivities(
    model: &FeederModel,
    state: &VoltageState,
) -> Result<SensitivityTensor, SensitivityError> {
    let ns = model.non_slack_terminals();
    let n = ns.len();
    let y = model.admittance();
    let v = DVector::from_column_slice(&state.voltages);
    let current = y * &v;

    let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for (k, &tk) in ns.iter().enumerate() {
        let vk = state.voltages[tk];
        for (l, &tl) in ns.iter().enumerate() {
            // M = diag(v) conj(Ynn); D1 = diag(conj(I)) on the diagonal only.
            let m = vk * y[(tk, tl)].conj();
            let d1 = if k == l {
                current[tk].conj()
            } else {
                Complex64::new(0.0, 0.0)
            };
            let plus = d1 + m;
            let minus = d1 - m;
            a[(k, l)] = plus.re;
            a[(k, n + l)] = -minus.im;
            a[(n + k, l)] = plus.im;
            a[(n + k, n + l)] = minus.re;
        }
    }

    let lu = a.lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..2 * n).map(|i| u[(i, i)].abs()).collect();
    let max_pivot = diag.iter().copied().fold(0.0, f64::max);
    let min_pivot = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if min_pivot > 0.0 {
        max_pivot / min_pivot
    } else {
        f64::INFINITY
    };
    if n > 0 && (!lu.is_invertible() || !(condition < 1e14)) {
        return Err(SensitivityError::Singular { condition });
    }
    // Right-hand side for control column c is the unit vector e_c: a p control
    // perturbs Re(s_k), a q control perturbs Im(s_k).
    let solution = if n > 0 {
        lu.solve(&DMatrix::<f64>::identity(2 * n, 2 * n))
            .ok_or(SensitivityError::Singular { condition })?
    } else {
        DMatrix::zeros(0, 0)
    };

    let n_terminals = model.n_terminals();
    let mut complex = DMatrix::from_element(n_terminals, 2 * n, Complex64::new(0.0, 0.0));
    for (k, &tk) in ns.iter().enumerate() {
        for c in 0..2 * n {
            complex[(tk, c)] = Complex64::new(solution[(k, c)], solution[(n + k, c)]);
        }
    }

    let mut magnitude = DMatrix::zeros(n_terminals, 2 * n);
    for t in 0..n_terminals {
        for c in 0..2 * n {
            magnitude[(t, c)] =
                magnitude_derivative(state.voltages[t], complex[(t, c)]).map_err(|_| {
                    let term = model.terminals()[t];
                    SensitivityError::Degenerate(format!("zero voltage at terminal {term}"))
                })?;
        }
    }

    let line_rows: Vec<(i64, LinePair)> = model
        .buses()
        .iter()
        .flat_map(|b| {
            LinePair::ALL
                .into_iter()
                .filter(move |&pair| b.phases.has_pair(pair))
                .map(move |pair| (b.id, pair))
        })
        .collect();
    let mut line_magnitude = DMatrix::zeros(line_rows.len(), 2 * n);
    for (r, &(bus, pair)) in line_rows.iter().enumerate() {
        let (p, q) = pair.phases();
        let tp = model.terminal_index(bus, p).expect("pair phases present");
        let tq = model.terminal_index(bus, q).expect("pair phases present");
        let vl = state.voltages[tp] - state.voltages[tq];
        for c in 0..2 * n {
            let dvl = complex[(tp, c)] - complex[(tq, c)];
            line_magnitude[(r, c)] = magnitude_derivative(vl, dvl).map_err(|_| {
                SensitivityError::Degenerate(format!("zero line voltage {pair} at bus {bus}"))
            })?;
        }
    }

    Ok(SensitivityTensor {
        controls: control_variables(model),
        complex,
        magnitude,
        line_rows,
        line_magnitude,
    })
}

/// Phase-voltage magnitude sensitivity of `terminal` to control column `control`.
pub fn magnitude_sensitivity(
    state: &VoltageState,
    sens: &SensitivityTensor,
    terminal: usize,
    control: usize,
) -> Result<f64, SensitivityError> {
    magnitude_derivative(state.voltages[terminal], sens.dv(terminal, control))
}

/// Line-voltage magnitude sensitivity of `pair` at `bus` to control column `control`.
pub fn line_magnitude_sensitivity(
    model: &FeederModel,
    state: &VoltageState,
    sens: &SensitivityTensor,
    bus: i64,
    pair: LinePair,
    control: usize,
) -> Result<f64, SensitivityError> {
    let (p, q) = pair.phases();
    let (tp, tq) = match (model.terminal_index(bus, p), model.terminal_index(bus, q)) {
        (Some(tp), Some(tq)) => (tp, tq),
        _ => return Err(SensitivityError::MissingPhase { bus, pair }),
    };
    let vl = state.voltages[tp] - state.voltages[tq];
    let dvl = sens.dv(tp, control) - sens.dv(tq, control);
    magnitude_derivative(vl, dvl)
        .map_err(|_| SensitivityError::Degenerate(format!("zero line voltage {pair} at bus {bus}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnitude_derivative_is_real_projection() {
        let v = Complex64::new(1.0, 0.0);
        assert_eq!(
            magnitude_derivative(v, Complex64::new(0.5, 1.0)).unwrap(),
            0.5
        );
        assert_eq!(
            magnitude_derivative(v, Complex64::new(0.0, 0.0)).unwrap(),
            0.0
        );
        assert!(matches!(
            magnitude_derivative(Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)),
            Err(SensitivityError::Degenerate(_))
        ));
    }

    #[test]
    fn rotated_voltage_projection() {
        // |v| = 2 at 90 degrees; dv along v contributes fully, orthogonal not at all.
        let v = Complex64::new(0.0, 2.0);
        assert!((magnitude_derivative(v, Complex64::new(0.0, 0.3)).unwrap() - 0.3).abs() < 1e-15);
        assert!(
            magnitude_derivative(v, Complex64::new(0.3, 0.0))
                .unwrap()
                .abs()
                < 1e-15
        );
    }
}
