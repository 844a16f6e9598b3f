//! Triplet-accuracy evaluation, full-song pooling, the user-agreement filter
//! and the MFCC vector-quantization baseline.

mod user;
pub mod vq;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::corpus::{read_triplets, write_triplets, FeatureStore, SampleRef, Triplet};
use crate::dimension::{Condition, Dimension};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::losses::{distance, masked_distance};
use crate::model::{Embedder, EmbeddingVector, MaskSet};

pub use user::{filter_user_triplets, Annotation, KeptTriplet, UserAnnotationSet, UserTriplet, AGREEMENT_THRESHOLD};
pub use vq::{vq_fit, vq_histogram, VqCodebook, VqConfig, VqSource};

/// Which part of the embedding a triplet is judged in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// The full embedding for every condition.
    All,
    /// The probed condition's masked subspace.
    Sub,
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Space::All),
            "sub" => Ok(Space::Sub),
            other => Err(Error::InvalidInput(format!("unknown space '{other}' (all|sub)"))),
        }
    }
}

/// Mean of unit embeddings, renormalized to unit length.
pub fn pool_embeddings(windows: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InsufficientAudio("no windows to pool".into()))?;
    let mut sum = vec![0.0; first.len()];
    for w in windows {
        if w.len() != sum.len() {
            return Err(Error::Shape("window embeddings differ in length".into()));
        }
        for (s, v) in sum.iter_mut().zip(&w.values) {
            *s += v;
        }
    }
    let n = windows.len() as f64;
    Ok(EmbeddingVector::new(sum.into_iter().map(|v| v / n).collect()).normalized())
}

/// Full-song embedding: non-overlapping model-sized windows from the start of
/// the song, embedded, averaged and renormalized.
pub fn song_embedding(w: &Waveform, features: &FeatureConfig, embedder: &Embedder) -> Result<EmbeddingVector> {
    let log_mel = FeatureExtractor::new(features.clone())?.log_mel(w)?;
    let mut store = FeatureStore::new(features.clone());
    store.insert_series("song", &log_mel)?;
    ModelSource::new(embedder, &store).song("song")
}

/// Fraction of triplets whose positive is strictly closer than the negative.
/// `distances` returns `(d(a, p), d(a, n))`.
pub fn triplet_accuracy<T>(triplets: &[T], mut distances: impl FnMut(&T) -> Result<(f64, f64)>) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::InvalidInput("no triplets to score".into()));
    }
    let mut correct = 0usize;
    for t in triplets {
        let (d_ap, d_an) = distances(t)?;
        if d_ap < d_an {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Produces the vectors triplets are scored on.
pub trait EmbeddingSource: Sync {
    /// One vector per whole track.
    fn songs(&self, tracks: &[&str]) -> Result<Vec<Vec<f64>>>;
    /// One vector per patch-sized excerpt.
    fn excerpts(&self, refs: &[&SampleRef]) -> Result<Vec<Vec<f64>>>;
}

/// Model embeddings over precomputed features.
pub struct ModelSource<'a> {
    embedder: &'a Embedder,
    store: &'a FeatureStore,
}

impl<'a> ModelSource<'a> {
    pub fn new(embedder: &'a Embedder, store: &'a FeatureStore) -> Self {
        Self { embedder, store }
    }

    pub fn song(&self, track: &str) -> Result<EmbeddingVector> {
        let patches = self
            .store
            .window_starts(track)?
            .into_iter()
            .map(|start| {
                self.store.patch(&SampleRef {
                    track: track.to_string(),
                    start,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = patches.iter().collect();
        pool_embeddings(&self.embedder.embed_batch(&refs)?)
    }
}

impl EmbeddingSource for ModelSource<'_> {
    fn songs(&self, tracks: &[&str]) -> Result<Vec<Vec<f64>>> {
        tracks.iter().map(|t| Ok(self.song(t)?.values)).collect()
    }

    fn excerpts(&self, refs: &[&SampleRef]) -> Result<Vec<Vec<f64>>> {
        let patches = refs.iter().map(|r| self.store.patch(r)).collect::<Result<Vec<_>>>()?;
        let p: Vec<_> = patches.iter().collect();
        Ok(self.embedder.embed_batch(&p)?.into_iter().map(|e| e.values).collect())
    }
}

/// Test triplets keyed by condition; persisted as `<condition>.jsonl` files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletSets {
    pub sets: BTreeMap<Condition, Vec<Triplet>>,
}

impl TripletSets {
    pub fn get(&self, c: Condition) -> Option<&[Triplet]> {
        self.sets.get(&c).map(Vec::as_slice)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for (c, ts) in &self.sets {
            write_triplets(&dir.join(format!("{c}.jsonl")), ts)?;
        }
        Ok(())
    }

    /// Loads whichever condition files exist in `dir`.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut sets = BTreeMap::new();
        for c in Condition::ALL {
            let p = dir.join(format!("{c}.jsonl"));
            if p.exists() {
                sets.insert(c, read_triplets(&p)?);
            }
        }
        if sets.is_empty() {
            return Err(Error::NotFound(format!("no triplet files in {}", dir.display())));
        }
        Ok(Self { sets })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub space: Space,
    pub genre: f64,
    pub mood: f64,
    pub instruments: f64,
    pub tempo: f64,
    /// Plain mean of the four dimension scores.
    pub overall: f64,
    pub track: Option<f64>,
    pub user: Option<f64>,
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn dimension(&self, d: Dimension) -> f64 {
        match d {
            Dimension::Genre => self.genre,
            Dimension::Mood => self.mood,
            Dimension::Instruments => self.instruments,
            Dimension::Tempo => self.tempo,
        }
    }
}

fn pair_distance(a: &[f64], b: &[f64], space: Space, c: Condition, masks: Option<&MaskSet>) -> Result<f64> {
    match (space, c.dimension()) {
        (Space::Sub, Some(d)) => {
            let masks = masks.ok_or_else(|| Error::InvalidInput("sub-space scoring needs masks".into()))?;
            masked_distance(a, b, masks.for_dimension(d))
        }
        _ => distance(a, b),
    }
}

/// Accuracy of semantic triplets scored on whole-track vectors.
pub fn song_level_accuracy(
    source: &dyn EmbeddingSource,
    triplets: &[Triplet],
    space: Space,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    let mut ids: Vec<&str> = triplets
        .iter()
        .flat_map(|t| [&t.anchor, &t.positive, &t.negative])
        .map(|r| r.track.as_str())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let vecs: HashMap<&str, Vec<f64>> = ids.iter().copied().zip(source.songs(&ids)?).collect();
    triplet_accuracy(triplets, |t| {
        let (a, p, n) = (&vecs[t.anchor.track.as_str()], &vecs[t.positive.track.as_str()], &vecs[t.negative.track.as_str()]);
        Ok((
            pair_distance(a, p, space, t.condition, masks)?,
            pair_distance(a, n, space, t.condition, masks)?,
        ))
    })
}

/// Accuracy of triplets scored on patch-sized excerpt vectors.
pub fn excerpt_accuracy(
    source: &dyn EmbeddingSource,
    triplets: &[Triplet],
    space: Space,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    let refs: Vec<&SampleRef> = triplets
        .iter()
        .flat_map(|t| [&t.anchor, &t.positive, &t.negative])
        .collect();
    let vecs = source.excerpts(&refs)?;
    let mut i = 0;
    triplet_accuracy(triplets, |t| {
        let (a, p, n) = (&vecs[i], &vecs[i + 1], &vecs[i + 2]);
        i += 3;
        Ok((
            pair_distance(a, p, space, t.condition, masks)?,
            pair_distance(a, n, space, t.condition, masks)?,
        ))
    })
}

/// Scores every dimension (required), the track set and the user set (both
/// optional). Semantic triplets use whole-track vectors; track triplets use
/// excerpts; user triplets use whole-track vectors in the full space.
pub fn evaluate(
    source: &dyn EmbeddingSource,
    sets: &TripletSets,
    user: Option<&[UserTriplet]>,
    space: Space,
    masks: Option<&MaskSet>,
) -> Result<EvalReport> {
    let mut scores = [0.0; 4];
    let mut counts = BTreeMap::new();
    for d in Dimension::ALL {
        let ts = sets
            .get(d.into())
            .filter(|ts| !ts.is_empty())
            .ok_or_else(|| Error::NotFound(format!("missing {d} triplet set")))?;
        if ts.iter().any(|t| t.condition != d.into()) {
            return Err(Error::InvalidInput(format!("{d} set contains triplets of another condition")));
        }
        scores[d.index()] = song_level_accuracy(source, ts, space, masks)?;
        counts.insert(d.to_string(), ts.len());
    }
    let track = match sets.get(Condition::Track).filter(|ts| !ts.is_empty()) {
        Some(ts) => {
            counts.insert(Condition::Track.to_string(), ts.len());
            Some(excerpt_accuracy(source, ts, space, masks)?)
        }
        None => None,
    };
    let user = match user.filter(|u| !u.is_empty()) {
        Some(us) => {
            counts.insert("user".into(), us.len());
            let as_triplets: Vec<Triplet> = us.iter().map(UserTriplet::to_triplet).collect();
            Some(song_level_accuracy(source, &as_triplets, Space::All, None)?)
        }
        None => None,
    };
    Ok(EvalReport {
        space,
        genre: scores[0],
        mood: scores[1],
        instruments: scores[2],
        tempo: scores[3],
        overall: scores.iter().sum::<f64>() / 4.0,
        track,
        user,
        counts,
    })
}
