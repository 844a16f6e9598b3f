use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A semantic axis of music similarity. Each owns one disjoint embedding subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Genre,
    Mood,
    Instruments,
    Tempo,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::Genre, Dimension::Mood, Dimension::Instruments, Dimension::Tempo];

    /// Position of the dimension's subspace in the embedding.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Genre => "genre",
            Dimension::Mood => "mood",
            Dimension::Instruments => "instruments",
            Dimension::Tempo => "tempo",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown dimension '{s}'")))
    }
}

/// What a triplet's similarity is defined by: one semantic dimension, or track identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Genre,
    Mood,
    Instruments,
    Tempo,
    Track,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Genre,
        Condition::Mood,
        Condition::Instruments,
        Condition::Tempo,
        Condition::Track,
    ];

    pub fn dimension(self) -> Option<Dimension> {
        match self {
            Condition::Genre => Some(Dimension::Genre),
            Condition::Mood => Some(Dimension::Mood),
            Condition::Instruments => Some(Dimension::Instruments),
            Condition::Tempo => Some(Dimension::Tempo),
            Condition::Track => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self.dimension() {
            Some(d) => d.as_str(),
            None => "track",
        }
    }
}

impl From<Dimension> for Condition {
    fn from(d: Dimension) -> Self {
        match d {
            Dimension::Genre => Condition::Genre,
            Dimension::Mood => Condition::Mood,
            Dimension::Instruments => Condition::Instruments,
            Dimension::Tempo => Condition::Tempo,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown condition '{s}'")))
    }
}
