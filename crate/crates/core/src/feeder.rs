//! Feeder data model: JSON ingestion, validation, per-unit conversion and
//! assembly of the compound (bus, phase) admittance matrix.
//!
//! Terminals are indexed bus-major (buses sorted by id) and phase-minor
//! (`a < b < c`). Absent phases have no terminal, so the admittance matrix
//! has dimension equal to the total number of present phases.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phase::{Phase, PhaseSet};

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("cannot read feeder file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed feeder JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid field `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("multiple slack buses ({0:?})")]
    MultipleSlack(Vec<i64>),
    #[error("missing slack bus")]
    MissingSlack,
    #[error("duplicate bus id {0}")]
    DuplicateBus(i64),
    #[error("non-radial topology: {0}")]
    NonRadial(String),
    #[error("singular impedance block on segment {from}-{to}")]
    SingularBranch { from: i64, to: i64 },
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> FeederError {
    FeederError::Schema {
        field: field.into(),
        message: message.into(),
    }
}

/// Raw on-disk feeder document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeederFile {
    pub s_base_kva: f64,
    pub buses: Vec<BusRecord>,
    pub segments: Vec<SegmentRecord>,
    #[serde(default)]
    pub loads: Vec<LoadRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: i64,
    pub kind: BusKind,
    pub phases: String,
    pub base_kv: f64,
}

/// 3x3 complex matrix as nested `[re, im]` pairs.
pub type RawMatrix = Vec<Vec<[f64; 2]>>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub from: i64,
    pub to: i64,
    pub z_ohm: RawMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_shunt_s: Option<RawMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoadRecord {
    pub bus: i64,
    pub phase: String,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Load,
}

/// Per-unit bases for one voltage zone. `s_base_kva` is the three-phase base,
/// so a single phase carries one third of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    pub s_base_kva: f64,
    pub base_kv: f64,
}

impl PerUnitBase {
    pub fn phase_power_kva(&self) -> f64 {
        self.s_base_kva / 3.0
    }

    pub fn impedance_ohm(&self) -> f64 {
        // (kV * 1e3)^2 / (kVA * 1e3 / 3)
        3000.0 * self.base_kv * self.base_kv / self.s_base_kva
    }

    pub fn power_to_pu(&self, kva: Complex64) -> Complex64 {
        kva / self.phase_power_kva()
    }

    pub fn power_from_pu(&self, pu: Complex64) -> Complex64 {
        pu * self.phase_power_kva()
    }

    pub fn impedance_to_pu(&self, ohm: Complex64) -> Complex64 {
        ohm / self.impedance_ohm()
    }

    pub fn impedance_from_pu(&self, pu: Complex64) -> Complex64 {
        pu * self.impedance_ohm()
    }

    pub fn admittance_to_pu(&self, siemens: Complex64) -> Complex64 {
        siemens * self.impedance_ohm()
    }

    pub fn admittance_from_pu(&self, pu: Complex64) -> Complex64 {
        pu / self.impedance_ohm()
    }

    pub fn voltage_to_pu(&self, kv: Complex64) -> Complex64 {
        kv / self.base_kv
    }

    pub fn voltage_from_pu(&self, pu: Complex64) -> Complex64 {
        pu * self.base_kv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
    pub phases: PhaseSet,
    pub base_kv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSegment {
    pub from_bus: i64,
    pub to_bus: i64,
    /// Phases carried by the segment (present at both ends).
    pub phases: PhaseSet,
    pub z_ohm: Matrix3<Complex64>,
    pub y_shunt_s: Option<Matrix3<Complex64>>,
}

/// Aggregated constant-power load at one bus, in kW / kvar per phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSpec {
    pub bus: i64,
    pub kva: [Option<Complex64>; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Terminal {
    pub bus: i64,
    pub phase: Phase,
}

impl std::fmt::Display for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.bus, self.phase)
    }
}

/// Validated, immutable feeder.
#[derive(Debug, Clone)]
pub struct FeederModel {
    s_base_kva: f64,
    buses: Vec<Bus>,
    segments: Vec<LineSegment>,
    loads: Vec<LoadSpec>,
    terminals: Vec<Terminal>,
    terminal_index: HashMap<Terminal, usize>,
    slack_bus: i64,
    admittance: DMatrix<Complex64>,
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, FeederError> {
    let text = fs::read_to_string(path)?;
    FeederModel::from_json_str(&text)
}

fn parse_matrix(raw: &RawMatrix, field: &str) -> Result<Matrix3<Complex64>, FeederError> {
    if raw.len() != 3 || raw.iter().any(|row| row.len() != 3) {
        return Err(schema(field, "expected a 3x3 matrix of [re, im] pairs"));
    }
    let mut m = Matrix3::zeros();
    for (r, row) in raw.iter().enumerate() {
        for (c, [re, im]) in row.iter().enumerate() {
            if !re.is_finite() || !im.is_finite() {
                return Err(schema(format!("{field}[{r}][{c}]"), "non-finite number"));
            }
            m[(r, c)] = Complex64::new(*re, *im);
        }
    }
    Ok(m)
}

fn finite_positive(value: f64, field: &str) -> Result<f64, FeederError> {
    if !value.is_finite() || value <= 0.0 {
        return Err(schema(
            field,
            format!("must be a finite positive number, got {value}"),
        ));
    }
    Ok(value)
}

impl FeederFile {
    pub fn from_json_str(text: &str) -> Result<Self, FeederError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("feeder file serializes")
    }

    pub fn into_model(self) -> Result<FeederModel, FeederError> {
        FeederModel::from_file(&self)
    }
}

impl FeederModel {
    pub fn from_json_str(text: &str) -> Result<Self, FeederError> {
        FeederFile::from_json_str(text)?.into_model()
    }

    pub fn from_file(file: &FeederFile) -> Result<Self, FeederError> {
        let s_base_kva = finite_positive(file.s_base_kva, "s_base_kva")?;

        let mut buses: BTreeMap<i64, Bus> = BTreeMap::new();
        for (i, rec) in file.buses.iter().enumerate() {
            let phases: PhaseSet = rec
                .phases
                .parse()
                .map_err(|e| schema(format!("buses[{i}].phases"), e))?;
            let base_kv = finite_positive(rec.base_kv, &format!("buses[{i}].base_kv"))?;
            let bus = Bus {
                id: rec.id,
                kind: rec.kind,
                phases,
                base_kv,
            };
            if buses.insert(rec.id, bus).is_some() {
                return Err(FeederError::DuplicateBus(rec.id));
            }
        }

        let slacks: Vec<i64> = buses
            .values()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        let slack_bus = match slacks.as_slice() {
            [] => return Err(FeederError::MissingSlack),
            [id] => *id,
            _ => return Err(FeederError::MultipleSlack(slacks)),
        };
        if !buses[&slack_bus].phases.is_three_phase() {
            return Err(schema(
                "buses.phases",
                format!("slack bus {slack_bus} must have phases abc"),
            ));
        }

        let mut segments = Vec::with_capacity(file.segments.len());
        for (i, rec) in file.segments.iter().enumerate() {
            let field = format!("segments[{i}]");
            let (from, to) = match (buses.get(&rec.from), buses.get(&rec.to)) {
                (Some(f), Some(t)) => (f, t),
                (None, _) => {
                    return Err(schema(
                        format!("{field}.from"),
                        format!("unknown bus {}", rec.from),
                    ))
                }
                (_, None) => {
                    return Err(schema(
                        format!("{field}.to"),
                        format!("unknown bus {}", rec.to),
                    ))
                }
            };
            if from.id == to.id {
                return Err(schema(field, "segment connects a bus to itself"));
            }
            if from.base_kv != to.base_kv {
                return Err(schema(
                    field,
                    format!(
                        "buses {} and {} have different base_kv (transformers are not supported)",
                        from.id, to.id
                    ),
                ));
            }
            let phases = from.phases.intersection(to.phases);
            if phases.is_empty() {
                return Err(schema(field, "endpoints share no phase"));
            }
            let z_ohm = parse_matrix(&rec.z_ohm, &format!("{field}.z_ohm"))?;
            let y_shunt_s = rec
                .y_shunt_s
                .as_ref()
                .map(|m| parse_matrix(m, &format!("{field}.y_shunt_s")))
                .transpose()?;
            for r in 0..3 {
                for c in 0..3 {
                    let carried = phases.contains(Phase::ALL[r]) && phases.contains(Phase::ALL[c]);
                    if carried {
                        continue;
                    }
                    if z_ohm[(r, c)] != Complex64::new(0.0, 0.0) {
                        return Err(schema(
                            format!("{field}.z_ohm[{r}][{c}]"),
                            "entry for an absent phase must be [0, 0]",
                        ));
                    }
                    if let Some(y) = &y_shunt_s {
                        if y[(r, c)] != Complex64::new(0.0, 0.0) {
                            return Err(schema(
                                format!("{field}.y_shunt_s[{r}][{c}]"),
                                "entry for an absent phase must be [0, 0]",
                            ));
                        }
                    }
                }
            }
            segments.push(LineSegment {
                from_bus: rec.from,
                to_bus: rec.to,
                phases,
                z_ohm,
                y_shunt_s,
            });
        }
        // Canonical order makes assembly independent of the file's segment order.
        segments.sort_by_key(|s| (s.from_bus.min(s.to_bus), s.from_bus.max(s.to_bus)));

        check_radial(&buses, &segments, slack_bus)?;

        let mut load_map: BTreeMap<i64, [Option<Complex64>; 3]> = BTreeMap::new();
        for (i, rec) in file.loads.iter().enumerate() {
            let field = format!("loads[{i}]");
            let bus = buses.get(&rec.bus).ok_or_else(|| {
                schema(format!("{field}.bus"), format!("unknown bus {}", rec.bus))
            })?;
            if bus.kind == BusKind::Slack {
                return Err(schema(
                    format!("{field}.bus"),
                    "slack bus cannot carry a load",
                ));
            }
            let phase: Phase = rec
                .phase
                .parse()
                .map_err(|e| schema(format!("{field}.phase"), e))?;
            if !bus.phases.contains(phase) {
                return Err(schema(
                    format!("{field}.phase"),
                    format!("phase {phase} is not present at bus {}", bus.id),
                ));
            }
            if !rec.p_kw.is_finite() {
                return Err(schema(format!("{field}.p_kw"), "non-finite number"));
            }
            if !rec.q_kvar.is_finite() {
                return Err(schema(format!("{field}.q_kvar"), "non-finite number"));
            }
            let slot = &mut load_map.entry(rec.bus).or_default()[phase.index()];
            *slot = Some(slot.unwrap_or_default() + Complex64::new(rec.p_kw, rec.q_kvar));
        }
        let loads = load_map
            .into_iter()
            .map(|(bus, kva)| LoadSpec { bus, kva })
            .collect();

        let buses: Vec<Bus> = buses.into_values().collect();
        let terminals: Vec<Terminal> = buses
            .iter()
            .flat_map(|b| {
                b.phases
                    .iter()
                    .map(move |phase| Terminal { bus: b.id, phase })
            })
            .collect();
        let terminal_index = terminals.iter().enumerate().map(|(i, t)| (*t, i)).collect();

        let mut model = FeederModel {
            s_base_kva,
            buses,
            segments,
            loads,
            terminals,
            terminal_index,
            slack_bus,
            admittance: DMatrix::zeros(0, 0),
        };
        model.admittance = assemble_admittance(&model)?;
        Ok(model)
    }

    pub fn s_base_kva(&self) -> f64 {
        self.s_base_kva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn bus(&self, id: i64) -> Option<&Bus> {
        self.buses
            .binary_search_by_key(&id, |b| b.id)
            .ok()
            .map(|i| &self.buses[i])
    }

    pub fn segments(&self) -> &[LineSegment] {
        &self.segments
    }

    pub fn loads(&self) -> &[LoadSpec] {
        &self.loads
    }

    pub fn slack_bus(&self) -> i64 {
        self.slack_bus
    }

    pub fn terminals(&self) -> &[Terminal] {
        &self.terminals
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn terminal_index(&self, bus: i64, phase: Phase) -> Option<usize> {
        self.terminal_index.get(&Terminal { bus, phase }).copied()
    }

    pub fn is_slack_terminal(&self, idx: usize) -> bool {
        self.terminals[idx].bus == self.slack_bus
    }

    /// Terminal indices of the slack bus, in phase order.
    pub fn slack_terminals(&self) -> Vec<usize> {
        (0..self.n_terminals())
            .filter(|&i| self.is_slack_terminal(i))
            .collect()
    }

    /// Terminal indices of every non-slack terminal, in terminal order.
    pub fn non_slack_terminals(&self) -> Vec<usize> {
        (0..self.n_terminals())
            .filter(|&i| !self.is_slack_terminal(i))
            .collect()
    }

    /// Buses carrying all three phases, in id order (includes the slack bus).
    pub fn three_phase_buses(&self) -> impl Iterator<Item = &Bus> {
        self.buses.iter().filter(|b| b.phases.is_three_phase())
    }

    pub fn per_unit_base(&self, bus: i64) -> Option<PerUnitBase> {
        self.bus(bus).map(|b| PerUnitBase {
            s_base_kva: self.s_base_kva,
            base_kv: b.base_kv,
        })
    }

    /// Compound admittance matrix in per-unit.
    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.admittance
    }

    /// Nominal load per terminal in per-unit (consumption positive).
    pub fn nominal_load_pu(&self) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n_terminals()];
        for load in &self.loads {
            let base = self.per_unit_base(load.bus).expect("validated bus");
            for phase in Phase::ALL {
                if let Some(kva) = load.kva[phase.index()] {
                    let idx = self
                        .terminal_index(load.bus, phase)
                        .expect("validated phase");
                    out[idx] = base.power_to_pu(kva);
                }
            }
        }
        out
    }
}

fn check_radial(
    buses: &BTreeMap<i64, Bus>,
    segments: &[LineSegment],
    slack_bus: i64,
) -> Result<(), FeederError> {
    if segments.len() + 1 != buses.len() {
        return Err(FeederError::NonRadial(format!(
            "{} buses require exactly {} segments, found {}",
            buses.len(),
            buses.len().saturating_sub(1),
            segments.len()
        )));
    }
    let mut adjacency: HashMap<i64, Vec<(i64, PhaseSet)>> = HashMap::new();
    for s in segments {
        adjacency
            .entry(s.from_bus)
            .or_default()
            .push((s.to_bus, s.phases));
        adjacency
            .entry(s.to_bus)
            .or_default()
            .push((s.from_bus, s.phases));
    }
    // Per-phase reachability from the slack; a bus phase reached by no
    // segment carrying it would leave a floating terminal.
    let mut reached: HashMap<i64, PhaseSet> = HashMap::new();
    reached.insert(slack_bus, PhaseSet::ABC);
    let mut queue = VecDeque::from([slack_bus]);
    while let Some(bus) = queue.pop_front() {
        let here = reached[&bus];
        for &(next, phases) in adjacency.get(&bus).map(Vec::as_slice).unwrap_or_default() {
            if reached.contains_key(&next) {
                continue;
            }
            reached.insert(next, here.intersection(phases));
            queue.push_back(next);
        }
    }
    for bus in buses.values() {
        match reached.get(&bus.id) {
            None => {
                return Err(FeederError::NonRadial(format!(
                    "bus {} is not connected to the slack bus",
                    bus.id
                )))
            }
            Some(ph) if ph.intersection(bus.phases) != bus.phases => {
                return Err(FeederError::NonRadial(format!(
                    "phases {} of bus {} have no path to the slack bus",
                    bus.phases, bus.id
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Invert the impedance block restricted to the segment's phases and scatter
/// back into a 3x3 matrix with zeros for absent phases.
pub(crate) fn series_admittance_pu(
    seg: &LineSegment,
    base: &PerUnitBase,
) -> Result<Matrix3<Complex64>, FeederError> {
    let phases: Vec<usize> = seg.phases.iter().map(Phase::index).collect();
    let n = phases.len();
    let sub = DMatrix::from_fn(n, n, |r, c| {
        base.impedance_to_pu(seg.z_ohm[(phases[r], phases[c])])
    });
    let singular = || FeederError::SingularBranch {
        from: seg.from_bus,
        to: seg.to_bus,
    };
    let inv = sub.clone().try_inverse().ok_or_else(singular)?;
    // Reject numerically singular blocks that still produce an "inverse".
    let scale = sub.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    let inv_scale = inv.iter().map(|z| z.norm()).fold(0.0_f64, f64::max);
    if !(scale > 0.0) || !inv_scale.is_finite() || scale * inv_scale > 1e12 {
        return Err(singular());
    }
    let mut out = Matrix3::zeros();
    for r in 0..n {
        for c in 0..n {
            out[(phases[r], phases[c])] = inv[(r, c)];
        }
    }
    Ok(out)
}

/// Assemble the compound admittance matrix from branch stamps. Shunt
/// admittance of a segment is split equally between its two ends.
pub fn assemble_admittance(model: &FeederModel) -> Result<DMatrix<Complex64>, FeederError> {
    let n = model.n_terminals();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for seg in &model.segments {
        let base = model.per_unit_base(seg.from_bus).expect("validated bus");
        let ys = series_admittance_pu(seg, &base)?;
        let ysh_half = seg
            .y_shunt_s
            .map(|m| m.map(|s| base.admittance_to_pu(s) * 0.5));
        for r in seg.phases.iter() {
            let fr = model
                .terminal_index(seg.from_bus, r)
                .expect("validated phase");
            let tr = model
                .terminal_index(seg.to_bus, r)
                .expect("validated phase");
            for c in seg.phases.iter() {
                let fc = model
                    .terminal_index(seg.from_bus, c)
                    .expect("validated phase");
                let tc = model
                    .terminal_index(seg.to_bus, c)
                    .expect("validated phase");
                let series = ys[(r.index(), c.index())];
                let shunt = ysh_half
                    .map(|m| m[(r.index(), c.index())])
                    .unwrap_or_default();
                y[(fr, fc)] += series + shunt;
                y[(tr, tc)] += series + shunt;
                y[(fr, tc)] -= series;
                y[(tr, fc)] -= series;
            }
        }
    }
    Ok(y)
}
