use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metadata::{Corpus, Split};
use crate::error::{Error, Result};

/// Split proportions for train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios(pub [f64; 3]);

impl SplitRatios {
    /// Roughly the 83/5/12 proportions of the large-scale setup.
    pub const DEFAULT: SplitRatios = SplitRatios([0.83, 0.05, 0.12]);

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (self.0.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "split ratios must be non-negative and sum to 1, got {:?}",
                self.0
            )));
        }
        Ok(())
    }

    /// Per-split counts for `n` items: train and validation are rounded, test
    /// takes the remainder.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((self.0[0] * n as f64).round() as usize).min(n);
        let valid = ((self.0[1] * n as f64).round() as usize).min(n - train);
        [train, valid, n - train - valid]
    }
}

/// Assigns each track id to a split: ids are sorted, shuffled with `seed`, and
/// cut according to `ratios`.
pub fn split_ids(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<HashMap<String, Split>> {
    ratios.validate()?;
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::InvalidInput("duplicate track ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let [train, valid, _] = ratios.counts(sorted.len());
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let s = if i < train {
                Split::Train
            } else if i < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            (id.clone(), s)
        })
        .collect())
}

pub fn make_split(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<HashMap<String, Split>> {
    let ids: Vec<String> = corpus.tracks().iter().map(|t| t.track_id.clone()).collect();
    split_ids(&ids, ratios, seed)
}
