//! Triplet sampling for the semantic dimensions and for track regularization.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metadata::{similar, Corpus, TrackMetadata};
use crate::dimension::{Condition, Dimension};
use crate::error::{Error, Result};
use crate::features::FrameInterval;
use crate::fsutil::{read_jsonl, write_jsonl};

pub const MAX_ATTEMPTS: usize = 10_000;

/// A patch of a track: the `patch_frames` frames starting at `start`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRef {
    pub track: String,
    pub start: usize,
}

impl SampleRef {
    pub fn interval(&self, patch_frames: usize) -> FrameInterval {
        FrameInterval {
            start: self.start,
            end: self.start + patch_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "a")]
    pub anchor: SampleRef,
    #[serde(rename = "p")]
    pub positive: SampleRef,
    #[serde(rename = "n")]
    pub negative: SampleRef,
    pub condition: Condition,
}

/// Largest allowed anchor/positive overlap for track triplets (half a patch).
pub fn max_track_overlap(patch_frames: usize) -> usize {
    patch_frames / 2
}

/// Samples triplets from a fixed pool of tracks. Tracks shorter than one patch
/// are excluded from the pool.
#[derive(Debug, Clone)]
pub struct TripletSampler<'a> {
    pool: Vec<&'a TrackMetadata>,
    frames: Vec<usize>,
    patch_frames: usize,
}

impl<'a> TripletSampler<'a> {
    pub fn new(
        tracks: impl IntoIterator<Item = &'a TrackMetadata>,
        frames_of: impl Fn(&str) -> Option<usize>,
        patch_frames: usize,
    ) -> Self {
        let mut pool = Vec::new();
        let mut frames = Vec::new();
        for t in tracks {
            if let Some(f) = frames_of(&t.track_id).filter(|&f| f >= patch_frames) {
                pool.push(t);
                frames.push(f);
            }
        }
        Self {
            pool,
            frames,
            patch_frames,
        }
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn patch_frames(&self) -> usize {
        self.patch_frames
    }

    fn random_ref<R: Rng + ?Sized>(&self, idx: usize, rng: &mut R) -> SampleRef {
        SampleRef {
            track: self.pool[idx].track_id.clone(),
            start: rng.random_range(0..=self.frames[idx] - self.patch_frames),
        }
    }

    fn pick<R: Rng + ?Sized>(candidates: &[usize], rng: &mut R) -> usize {
        candidates[rng.random_range(0..candidates.len())]
    }

    /// Anchor drawn uniformly over tracks that admit at least one valid triplet;
    /// positive uniform over the anchor's similar tracks, negative uniform over
    /// its dissimilar tracks.
    pub fn sample_category<R: Rng + ?Sized>(&self, d: Dimension, rng: &mut R) -> Result<Triplet> {
        self.sample_with(d.into(), rng, |a, p| a != p && similar(self.pool[a], self.pool[p], d), |a, n| {
            !similar(self.pool[a], self.pool[n], d)
        })
    }

    /// Like [`Self::sample_category`] but the positive agrees with the anchor
    /// only along `d`.
    pub fn sample_conflict<R: Rng + ?Sized>(&self, d: Dimension, rng: &mut R) -> Result<Triplet> {
        let others: Vec<Dimension> = Dimension::ALL.into_iter().filter(|&o| o != d).collect();
        self.sample_with(
            d.into(),
            rng,
            |a, p| {
                let (x, y) = (self.pool[a], self.pool[p]);
                a != p && similar(x, y, d) && others.iter().all(|&o| !similar(x, y, o))
            },
            |a, n| !similar(self.pool[a], self.pool[n], d),
        )
    }

    fn sample_with<R: Rng + ?Sized>(
        &self,
        condition: Condition,
        rng: &mut R,
        positive_ok: impl Fn(usize, usize) -> bool,
        negative_ok: impl Fn(usize, usize) -> bool,
    ) -> Result<Triplet> {
        if self.pool.is_empty() {
            return Err(Error::Sampling("empty track pool".into()));
        }
        for _ in 0..MAX_ATTEMPTS {
            let a = rng.random_range(0..self.pool.len());
            let positives: Vec<usize> = (0..self.pool.len()).filter(|&p| positive_ok(a, p)).collect();
            if positives.is_empty() {
                continue;
            }
            let negatives: Vec<usize> = (0..self.pool.len()).filter(|&n| negative_ok(a, n)).collect();
            if negatives.is_empty() {
                continue;
            }
            let p = Self::pick(&positives, rng);
            let n = Self::pick(&negatives, rng);
            return Ok(Triplet {
                anchor: self.random_ref(a, rng),
                positive: self.random_ref(p, rng),
                negative: self.random_ref(n, rng),
                condition,
            });
        }
        Err(Error::Sampling(format!(
            "no valid {condition} triplet found after {MAX_ATTEMPTS} attempts"
        )))
    }

    /// Anchor and positive from the same track overlapping by at most half a
    /// patch; negative from a different, uniformly chosen track.
    pub fn sample_track<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Triplet> {
        let p = self.patch_frames;
        let min_gap = p - max_track_overlap(p);
        let eligible: Vec<usize> = (0..self.pool.len()).filter(|&i| self.frames[i] >= p + min_gap).collect();
        if eligible.is_empty() {
            return Err(Error::Sampling(format!(
                "no track has the {} frames needed for two patches overlapping at most {}",
                p + min_gap,
                max_track_overlap(p)
            )));
        }
        if self.pool.len() < 2 {
            return Err(Error::Sampling("track triplets need at least two tracks".into()));
        }
        let a = Self::pick(&eligible, rng);
        let last = self.frames[a] - p;
        // Only starts with a partner far enough away on either side.
        let anchors: Vec<usize> = (0..=last).filter(|&s| s >= min_gap || s + min_gap <= last).collect();
        let a_start = Self::pick(&anchors, rng);
        let valid: Vec<usize> = (0..=last).filter(|&s| s.abs_diff(a_start) >= min_gap).collect();
        let p_start = Self::pick(&valid, rng);
        let mut n = rng.random_range(0..self.pool.len() - 1);
        if n >= a {
            n += 1;
        }
        let track = self.pool[a].track_id.clone();
        Ok(Triplet {
            anchor: SampleRef {
                track: track.clone(),
                start: a_start,
            },
            positive: SampleRef { track, start: p_start },
            negative: self.random_ref(n, rng),
            condition: Condition::Track,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, c: Condition, rng: &mut R) -> Result<Triplet> {
        match c.dimension() {
            Some(d) => self.sample_category(d, rng),
            None => self.sample_track(rng),
        }
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, c: Condition, count: usize, rng: &mut R) -> Result<Vec<Triplet>> {
        (0..count).map(|_| self.sample(c, rng)).collect()
    }
}

/// Checks the triplet invariants against the corpus.
pub fn check_triplet(t: &Triplet, corpus: &Corpus, patch_frames: usize) -> Result<()> {
    let get = |r: &SampleRef| {
        corpus
            .get(&r.track)
            .ok_or_else(|| Error::NotFound(format!("unknown track '{}'", r.track)))
    };
    let (a, p, n) = (get(&t.anchor)?, get(&t.positive)?, get(&t.negative)?);
    let fail = |m: String| Err(Error::Validation(m));
    match t.condition.dimension() {
        Some(d) => {
            if !similar(a, p, d) {
                return fail(format!("positive '{}' not similar to anchor along {d}", p.track_id));
            }
            if similar(a, n, d) {
                return fail(format!("negative '{}' similar to anchor along {d}", n.track_id));
            }
        }
        None => {
            if t.anchor.track != t.positive.track {
                return fail("track triplet positive comes from another track".into());
            }
            if t.negative.track == t.anchor.track {
                return fail("track triplet negative comes from the anchor track".into());
            }
            let overlap = t
                .anchor
                .interval(patch_frames)
                .overlap(&t.positive.interval(patch_frames));
            if overlap > max_track_overlap(patch_frames) {
                return fail(format!("anchor/positive overlap {overlap} frames"));
            }
        }
    }
    Ok(())
}

pub fn sample_category_triplet<R: Rng + ?Sized>(
    sampler: &TripletSampler<'_>,
    d: Dimension,
    rng: &mut R,
) -> Result<Triplet> {
    sampler.sample_category(d, rng)
}

pub fn sample_track_triplet<R: Rng + ?Sized>(sampler: &TripletSampler<'_>, rng: &mut R) -> Result<Triplet> {
    sampler.sample_track(rng)
}

pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<()> {
    write_jsonl(path, triplets)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    read_jsonl(path)
}
