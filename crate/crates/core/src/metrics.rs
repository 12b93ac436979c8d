//! Symmetrical components and the three voltage-unbalance metrics:
//! VUF (negative / positive sequence), PVUR (phase magnitudes) and LVUR
//! (line magnitudes). Values are dimensionless per-unit ratios.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::phase::{LinePair, Phase};
use crate::powerflow::VoltageState;

/// Guard on sequence magnitudes below which VUF (or its derivative) is undefined.
pub const SEQ_EPSILON: f64 = 1e-9;
/// Two case deviations closer than this are reported as a kink.
pub const KINK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("degenerate point at bus {bus}: {reason}")]
    Degenerate { bus: i64, reason: String },
    #[error("vanishing positive-sequence voltage (|v+| = {0:.3e})")]
    VanishingPositiveSequence(f64),
}

/// `e^{j 2 pi / 3}`.
pub fn alpha() -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceVoltages {
    pub zero: Complex64,
    pub positive: Complex64,
    pub negative: Complex64,
}

pub fn to_sequence(va: Complex64, vb: Complex64, vc: Complex64) -> SequenceVoltages {
    let a = alpha();
    let a2 = a * a;
    SequenceVoltages {
        zero: (va + vb + vc) / 3.0,
        positive: (va + a * vb + a2 * vc) / 3.0,
        negative: (va + a2 * vb + a * vc) / 3.0,
    }
}

/// Inverse transform back to `[va, vb, vc]`.
pub fn from_sequence(seq: &SequenceVoltages) -> [Complex64; 3] {
    let a = alpha();
    let a2 = a * a;
    [
        seq.zero + seq.positive + seq.negative,
        seq.zero + a2 * seq.positive + a * seq.negative,
        seq.zero + a * seq.positive + a2 * seq.negative,
    ]
}

pub fn vuf(seq: &SequenceVoltages) -> Result<f64, MetricError> {
    let pos = seq.positive.norm();
    if !(pos > SEQ_EPSILON) {
        return Err(MetricError::VanishingPositiveSequence(pos));
    }
    Ok(seq.negative.norm() / pos)
}

/// Index of the first maximum; ties go to the lowest index.
fn first_argmax(values: [f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if values[k] > values[best] {
            best = k;
        }
    }
    best
}

/// Max deviation from the mean divided by the mean, with the argmax index.
pub fn max_deviation_ratio(m: [f64; 3]) -> (f64, usize) {
    let avg = (m[0] + m[1] + m[2]) / 3.0;
    let dev = m.map(|x| (x - avg).abs());
    let k = first_argmax(dev);
    (dev[k] / avg, k)
}

/// Three-case rewrite: `|2 m_k - m_{k+1} - m_{k+2}| / (m_a + m_b + m_c)` for the
/// case `k` whose numerator is largest.
pub fn case_ratio(m: [f64; 3]) -> (f64, usize) {
    let sum = m[0] + m[1] + m[2];
    let num = case_numerators(m).map(f64::abs);
    let k = first_argmax(num);
    (num[k] / sum, k)
}

/// Signed numerators `2 m_k - m_{k+1} - m_{k+2}` for each case `k`.
pub fn case_numerators(m: [f64; 3]) -> [f64; 3] {
    [
        2.0 * m[0] - m[1] - m[2],
        2.0 * m[1] - m[0] - m[2],
        2.0 * m[2] - m[0] - m[1],
    ]
}

/// True when the winning case deviation is within [`KINK_TOLERANCE`] of another.
pub fn is_kink(m: [f64; 3]) -> bool {
    let avg = (m[0] + m[1] + m[2]) / 3.0;
    let dev = m.map(|x| (x - avg).abs());
    let k = first_argmax(dev);
    (0..3).any(|j| j != k && dev[k] - dev[j] <= KINK_TOLERANCE)
}

pub fn pvur(va: f64, vb: f64, vc: f64) -> (f64, Phase) {
    let (value, k) = max_deviation_ratio([va, vb, vc]);
    (value, Phase::ALL[k])
}

pub fn pvur_by_cases(va: f64, vb: f64, vc: f64) -> (f64, Phase) {
    let (value, k) = case_ratio([va, vb, vc]);
    (value, Phase::ALL[k])
}

pub fn lvur(vab: f64, vbc: f64, vca: f64) -> (f64, LinePair) {
    let (value, k) = max_deviation_ratio([vab, vbc, vca]);
    (value, LinePair::ALL[k])
}

pub fn lvur_by_cases(vab: f64, vbc: f64, vca: f64) -> (f64, LinePair) {
    let (value, k) = case_ratio([vab, vbc, vca]);
    (value, LinePair::ALL[k])
}

/// Phase-voltage triple `[va, vb, vc]` of a three-phase bus.
pub fn bus_voltages(model: &FeederModel, state: &VoltageState, bus: i64) -> Option<[Complex64; 3]> {
    let mut out = [Complex64::new(0.0, 0.0); 3];
    for p in Phase::ALL {
        out[p.index()] = state.voltage(model, bus, p)?;
    }
    Some(out)
}

/// Line-voltage magnitudes `[|vab|, |vbc|, |vca|]`.
pub fn line_magnitudes(v: &[Complex64; 3]) -> [f64; 3] {
    LinePair::ALL.map(|pair| {
        let (p, q) = pair.phases();
        (v[p.index()] - v[q.index()]).norm()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusUnbalance {
    pub bus: i64,
    pub vuf: f64,
    pub pvur: f64,
    pub pvur_case: Phase,
    pub pvur_kink: bool,
    pub lvur: f64,
    pub lvur_case: LinePair,
    pub lvur_kink: bool,
    pub v_p_avg: f64,
    pub v_l_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Copy, Hash, PartialOrd, Ord)]
pub enum Metric {
    Vuf,
    Pvur,
    Lvur,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Vuf, Metric::Pvur, Metric::Lvur];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Vuf => "vuf",
            Metric::Pvur => "pvur",
            Metric::Lvur => "lvur",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vuf" => Ok(Metric::Vuf),
            "pvur" => Ok(Metric::Pvur),
            "lvur" => Ok(Metric::Lvur),
            other => Err(format!(
                "unknown metric `{other}` (expected vuf, pvur or lvur)"
            )),
        }
    }
}

impl BusUnbalance {
    pub fn value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Vuf => self.vuf,
            Metric::Pvur => self.pvur,
            Metric::Lvur => self.lvur,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbalanceReport {
    /// Three-phase buses in id order.
    pub buses: Vec<BusUnbalance>,
    /// Buses without all three phases, with the reason they were omitted.
    pub omitted: Vec<(i64, String)>,
}

impl UnbalanceReport {
    pub fn get(&self, bus: i64) -> Option<&BusUnbalance> {
        self.buses.iter().find(|b| b.bus == bus)
    }

    pub fn total(&self, metric: Metric) -> f64 {
        self.buses.iter().map(|b| b.value(metric)).sum()
    }
}

pub fn evaluate_bus(bus: i64, v: &[Complex64; 3]) -> Result<BusUnbalance, MetricError> {
    let seq = to_sequence(v[0], v[1], v[2]);
    let vuf = vuf(&seq).map_err(|e| MetricError::Degenerate {
        bus,
        reason: e.to_string(),
    })?;
    let pm = v.map(|x| x.norm());
    let lm = line_magnitudes(v);
    let (pvur, pvur_case) = pvur(pm[0], pm[1], pm[2]);
    let (lvur, lvur_case) = lvur(lm[0], lm[1], lm[2]);
    Ok(BusUnbalance {
        bus,
        vuf,
        pvur,
        pvur_case,
        pvur_kink: is_kink(pm),
        lvur,
        lvur_case,
        lvur_kink: is_kink(lm),
        v_p_avg: pm.iter().sum::<f64>() / 3.0,
        v_l_avg: lm.iter().sum::<f64>() / 3.0,
    })
}

/// Metrics at every three-phase bus of `state`.
pub fn report(model: &FeederModel, state: &VoltageState) -> Result<UnbalanceReport, MetricError> {
    let mut buses = Vec::new();
    let mut omitted = Vec::new();
    for bus in model.buses() {
        match bus_voltages(model, state, bus.id) {
            Some(v) => buses.push(evaluate_bus(bus.id, &v)?),
            None => omitted.push((
                bus.id,
                format!("phases {} only; metrics need a three-phase bus", bus.phases),
            )),
        }
    }
    Ok(UnbalanceReport { buses, omitted })
}
