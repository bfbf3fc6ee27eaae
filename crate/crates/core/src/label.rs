//! The closed three-way stance label set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Attitude of a text toward a target.
///
/// The declaration order (`Favor`, `Against`, `None`) is the fixed class
/// order used for confusion-matrix indices, model rows and tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StanceLabel {
    Favor,
    Against,
    None,
}

impl StanceLabel {
    pub const ALL: [StanceLabel; 3] = [StanceLabel::Favor, StanceLabel::Against, StanceLabel::None];

    pub fn index(self) -> usize {
        match self {
            StanceLabel::Favor => 0,
            StanceLabel::Against => 1,
            StanceLabel::None => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Capitalized label word as it appears in prompts.
    pub fn word(self) -> &'static str {
        match self {
            StanceLabel::Favor => "Favor",
            StanceLabel::Against => "Against",
            StanceLabel::None => "None",
        }
    }

    /// Swap Favor and Against; None is fixed.
    pub fn reversed(self) -> Self {
        match self {
            StanceLabel::Favor => StanceLabel::Against,
            StanceLabel::Against => StanceLabel::Favor,
            StanceLabel::None => StanceLabel::None,
        }
    }

    /// Lenient ingest mapping shared by the corpus loaders.
    pub fn from_synonym(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "favor" | "pro" | "support" => Some(StanceLabel::Favor),
            "against" | "con" | "oppose" => Some(StanceLabel::Against),
            "none" | "neutral" | "neither" => Some(StanceLabel::None),
            _ => None,
        }
    }
}

impl fmt::Display for StanceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unrecognized stance label {0:?}")]
pub struct ParseLabelError(pub String);

impl FromStr for StanceLabel {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StanceLabel::from_synonym(s).ok_or_else(|| ParseLabelError(s.to_string()))
    }
}

/// A decoded prediction: one of the three labels, or a generation that no
/// decoding rule could map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decoded {
    Label(StanceLabel),
    Undecodable,
}

impl Decoded {
    pub fn label(self) -> Option<StanceLabel> {
        match self {
            Decoded::Label(l) => Some(l),
            Decoded::Undecodable => None,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Decoded::Label(l) => Decoded::Label(l.reversed()),
            Decoded::Undecodable => Decoded::Undecodable,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Decoded::Label(StanceLabel::Favor) => "favor",
            Decoded::Label(StanceLabel::Against) => "against",
            Decoded::Label(StanceLabel::None) => "none",
            Decoded::Undecodable => "undecodable",
        }
    }
}

impl From<StanceLabel> for Decoded {
    fn from(l: StanceLabel) -> Self {
        Decoded::Label(l)
    }
}

impl fmt::Display for Decoded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Decoded {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Decoded {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("undecodable") {
            return Ok(Decoded::Undecodable);
        }
        s.parse::<StanceLabel>()
            .map(Decoded::Label)
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        for l in StanceLabel::ALL {
            assert_eq!(StanceLabel::from_index(l.index()), Some(l));
        }
        assert_eq!(StanceLabel::from_index(3), None);
    }

    #[test]
    fn reversal_is_an_involution() {
        for l in StanceLabel::ALL {
            assert_eq!(l.reversed().reversed(), l);
        }
        assert_eq!(StanceLabel::None.reversed(), StanceLabel::None);
    }

    #[test]
    fn synonyms() {
        assert_eq!("FAVOR".parse::<StanceLabel>().unwrap(), StanceLabel::Favor);
        assert_eq!(" oppose ".parse::<StanceLabel>().unwrap(), StanceLabel::Against);
        assert_eq!("Neither".parse::<StanceLabel>().unwrap(), StanceLabel::None);
        assert!("maybe".parse::<StanceLabel>().is_err());
    }

    #[test]
    fn decoded_serde() {
        let v = serde_json::to_string(&Decoded::Undecodable).unwrap();
        assert_eq!(v, "\"undecodable\"");
        let back: Decoded = serde_json::from_str("\"against\"").unwrap();
        assert_eq!(back, Decoded::Label(StanceLabel::Against));
    }
}
