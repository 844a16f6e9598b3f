//! Listener annotations and the agreement filter.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SampleRef, Triplet};
use crate::dimension::Condition;
use crate::error::{Error, Result};
use crate::fsutil::read_jsonl;

pub const AGREEMENT_THRESHOLD: f64 = 0.9;

/// Vote tally for one user triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub triplet_id: String,
    pub votes_p: u32,
    pub votes_n: u32,
}

impl Annotation {
    pub fn total(&self) -> u32 {
        self.votes_p + self.votes_n
    }

    /// Majority votes over total votes, in `[0.5, 1]`.
    pub fn agreement(&self) -> f64 {
        self.votes_p.max(self.votes_n) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserAnnotationSet {
    pub annotations: Vec<Annotation>,
}

impl UserAnnotationSet {
    pub fn new(annotations: Vec<Annotation>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for a in &annotations {
            if a.total() == 0 {
                return Err(Error::Validation(format!("triplet '{}' has no votes", a.triplet_id)));
            }
            if !seen.insert(a.triplet_id.as_str()) {
                return Err(Error::Validation(format!("duplicate annotation for '{}'", a.triplet_id)));
            }
        }
        Ok(Self { annotations })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_jsonl(path)?)
    }
}

/// A triplet that passed the filter; `swapped` means listeners preferred the
/// stored negative, so positive and negative trade places.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptTriplet {
    pub triplet_id: String,
    pub swapped: bool,
    pub agreement: f64,
}

/// Keeps annotations whose agreement reaches `threshold`, oriented by the
/// majority vote.
pub fn filter_user_triplets(set: &UserAnnotationSet, threshold: f64) -> Vec<KeptTriplet> {
    set.annotations
        .iter()
        .filter(|a| a.agreement() >= threshold)
        .map(|a| KeptTriplet {
            triplet_id: a.triplet_id.clone(),
            swapped: a.votes_n > a.votes_p,
            agreement: a.agreement(),
        })
        .collect()
}

/// Song-level triplet as shown to listeners.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTriplet {
    pub triplet_id: String,
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

impl UserTriplet {
    pub fn to_triplet(&self) -> Triplet {
        let r = |t: &str| SampleRef {
            track: t.to_string(),
            start: 0,
        };
        Triplet {
            anchor: r(&self.anchor),
            positive: r(&self.positive),
            negative: r(&self.negative),
            condition: Condition::Track,
        }
    }

    pub fn load(path: &Path) -> Result<Vec<Self>> {
        read_jsonl(path)
    }

    /// Applies a filter result: drops unlisted triplets and reorients swapped ones.
    pub fn select(triplets: &[UserTriplet], kept: &[KeptTriplet]) -> Vec<UserTriplet> {
        let by_id: HashMap<&str, &KeptTriplet> = kept.iter().map(|k| (k.triplet_id.as_str(), k)).collect();
        triplets
            .iter()
            .filter_map(|t| {
                by_id.get(t.triplet_id.as_str()).map(|k| {
                    let mut t = t.clone();
                    if k.swapped {
                        std::mem::swap(&mut t.positive, &mut t.negative);
                    }
                    t
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(id: &str, p: u32, n: u32) -> Annotation {
        Annotation {
            triplet_id: id.into(),
            votes_p: p,
            votes_n: n,
        }
    }

    #[test]
    fn threshold_and_relabeling() {
        let set = UserAnnotationSet::new(vec![ann("a", 10, 0), ann("b", 8, 2), ann("c", 1, 9), ann("d", 9, 1)]).unwrap();
        let kept = filter_user_triplets(&set, AGREEMENT_THRESHOLD);
        let ids: Vec<_> = kept.iter().map(|k| (k.triplet_id.as_str(), k.swapped)).collect();
        assert_eq!(ids, [("a", false), ("c", true), ("d", false)]);
        assert_eq!(kept[0].agreement, 1.0);
        let ts = vec![UserTriplet {
            triplet_id: "c".into(),
            anchor: "x".into(),
            positive: "y".into(),
            negative: "z".into(),
        }];
        let sel = UserTriplet::select(&ts, &kept);
        assert_eq!((sel[0].positive.as_str(), sel[0].negative.as_str()), ("z", "y"));
    }

    #[test]
    fn invalid_tallies_rejected() {
        assert!(UserAnnotationSet::new(vec![ann("a", 0, 0)]).is_err());
        assert!(UserAnnotationSet::new(vec![ann("a", 1, 0), ann("a", 2, 0)]).is_err());
    }
}
