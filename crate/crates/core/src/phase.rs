use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One conductor of a three-phase system. Ordering is `A < B < C` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "a",
            Phase::B => "b",
            Phase::C => "c",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(Phase::A),
            "b" | "B" => Ok(Phase::B),
            "c" | "C" => Ok(Phase::C),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// Ordered pair of phases defining a line (phase-to-phase) voltage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LinePair {
    Ab,
    Bc,
    Ca,
}

impl LinePair {
    pub const ALL: [LinePair; 3] = [LinePair::Ab, LinePair::Bc, LinePair::Ca];

    /// `(from, to)` such that the line voltage is `v_from - v_to`.
    pub fn phases(self) -> (Phase, Phase) {
        match self {
            LinePair::Ab => (Phase::A, Phase::B),
            LinePair::Bc => (Phase::B, Phase::C),
            LinePair::Ca => (Phase::C, Phase::A),
        }
    }

    pub fn index(self) -> usize {
        match self {
            LinePair::Ab => 0,
            LinePair::Bc => 1,
            LinePair::Ca => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinePair::Ab => "ab",
            LinePair::Bc => "bc",
            LinePair::Ca => "ca",
        }
    }
}

impl fmt::Display for LinePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Subset of `{a, b, c}` present at a bus, stored as a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn insert(&mut self, phase: Phase) {
        self.0 |= 1 << phase.index();
    }

    pub fn intersection(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_three_phase(self) -> bool {
        self == PhaseSet::ABC
    }

    /// Present phases in `a < b < c` order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn has_pair(self, pair: LinePair) -> bool {
        let (p, q) = pair.phases();
        self.contains(p) && self.contains(q)
    }
}

impl FromIterator<Phase> for PhaseSet {
    fn from_iter<T: IntoIterator<Item = Phase>>(iter: T) -> Self {
        let mut set = PhaseSet::EMPTY;
        for p in iter {
            set.insert(p);
        }
        set
    }
}

impl FromStr for PhaseSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = PhaseSet::EMPTY;
        for ch in s.chars() {
            let phase: Phase = ch.to_string().parse()?;
            if set.contains(phase) {
                return Err(format!("phase `{phase}` listed twice in `{s}`"));
            }
            set.insert(phase);
        }
        if set.is_empty() {
            return Err("empty phase list".to_string());
        }
        Ok(set)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            f.write_str(p.as_str())?;
        }
        Ok(())
    }
}
