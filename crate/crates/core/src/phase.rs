//! Phase labels and phase masks.

use std::fmt;

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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

    pub fn from_index(i: usize) -> Phase {
        Phase::ALL[i % 3]
    }

    /// Nominal angle of a balanced positive-sequence set.
    pub fn nominal_angle_deg(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -120.0,
            Phase::C => 120.0,
        }
    }

    /// The phase following this one in ABC rotation (A→B, B→C, C→A).
    pub fn next(self) -> Phase {
        Phase::from_index(self.index() + 1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s.trim() {
            "A" | "a" => Some(Phase::A),
            "B" | "b" => Some(Phase::B),
            "C" | "c" => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Set of present phases. Serialized as a list such as `["A", "C"]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct PhaseMask(u8);

impl PhaseMask {
    pub const ABC: PhaseMask = PhaseMask(0b111);
    pub const EMPTY: PhaseMask = PhaseMask(0);

    pub fn new(a: bool, b: bool, c: bool) -> Self {
        PhaseMask(a as u8 | (b as u8) << 1 | (c as u8) << 2)
    }

    pub fn single(p: Phase) -> Self {
        PhaseMask(1 << p.index())
    }

    pub fn from_phases(phases: &[Phase]) -> Self {
        phases.iter().fold(PhaseMask::EMPTY, |m, &p| m.with(p))
    }

    pub fn with(self, p: Phase) -> Self {
        PhaseMask(self.0 | 1 << p.index())
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset_of(self, other: PhaseMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersect(self, other: PhaseMask) -> PhaseMask {
        PhaseMask(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |&p| self.contains(p))
    }
}

impl fmt::Display for PhaseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            f.write_str(p.as_str())?;
        }
        Ok(())
    }
}

impl Serialize for PhaseMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.count()))?;
        for p in self.iter() {
            seq.serialize_element(p.as_str())?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for PhaseMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MaskVisitor;
        impl<'de> Visitor<'de> for MaskVisitor {
            type Value = PhaseMask;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a list of phase names drawn from \"A\", \"B\", \"C\"")
            }
            fn visit_seq<V: SeqAccess<'de>>(self, mut seq: V) -> Result<PhaseMask, V::Error> {
                let mut mask = PhaseMask::EMPTY;
                while let Some(name) = seq.next_element::<String>()? {
                    let p = Phase::parse(&name)
                        .ok_or_else(|| de::Error::custom(format!("unknown phase {name:?}")))?;
                    if mask.contains(p) {
                        return Err(de::Error::custom(format!("phase {p} listed twice")));
                    }
                    mask = mask.with(p);
                }
                Ok(mask)
            }
        }
        deserializer.deserialize_seq(MaskVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip_and_order() {
        let m: PhaseMask = serde_json::from_str(r#"["C","A"]"#).unwrap();
        assert_eq!(m, PhaseMask::new(true, false, true));
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"["A","C"]"#);
        assert!(serde_json::from_str::<PhaseMask>(r#"["A","A"]"#).is_err());
        assert!(serde_json::from_str::<PhaseMask>(r#"["D"]"#).is_err());
    }

    #[test]
    fn subset_logic() {
        let a = PhaseMask::single(Phase::A);
        assert!(a.is_subset_of(PhaseMask::ABC));
        assert!(!PhaseMask::ABC.is_subset_of(a));
        assert_eq!(PhaseMask::ABC.count(), 3);
        assert_eq!(Phase::C.next(), Phase::A);
    }
}
