//! Persistent full-song embedding index with per-dimension weighted retrieval.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Waveform;
use crate::container::{Container, NamedArray};
use crate::corpus::{Corpus, FeatureStore, TrackMetadata};
use crate::dimension::Dimension;
use crate::error::{Error, Result};
use crate::evaluation::{song_embedding, ModelSource};
use crate::features::FeatureConfig;
use crate::model::{Checkpoint, Embedder, EmbeddingVector, MaskSet};

/// Non-negative importance of each dimension's subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightProfile {
    pub genre: f64,
    pub mood: f64,
    pub instruments: f64,
    pub tempo: f64,
}

impl Default for WeightProfile {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl WeightProfile {
    pub fn new(genre: f64, mood: f64, instruments: f64, tempo: f64) -> Result<Self> {
        let w = Self {
            genre,
            mood,
            instruments,
            tempo,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn uniform(c: f64) -> Self {
        Self {
            genre: c,
            mood: c,
            instruments: c,
            tempo: c,
        }
    }

    pub fn get(&self, d: Dimension) -> f64 {
        match d {
            Dimension::Genre => self.genre,
            Dimension::Mood => self.mood,
            Dimension::Instruments => self.instruments,
            Dimension::Tempo => self.tempo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws = Dimension::ALL.map(|d| self.get(d));
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidInput("at least one weight must be positive".into()));
        }
        Ok(())
    }
}

/// `sqrt(sum_s w_s * |(e1 - e2) * m_s|^2)` over the four dimension subspaces.
pub fn weighted_distance(e1: &[f64], e2: &[f64], w: &WeightProfile, masks: &MaskSet) -> Result<f64> {
    w.validate()?;
    if e1.len() != e2.len() || e1.len() != masks.dim() {
        return Err(Error::Shape(format!(
            "embeddings of length {} and {} against {}-d masks",
            e1.len(),
            e2.len(),
            masks.dim()
        )));
    }
    let mut total = 0.0;
    for d in Dimension::ALL {
        let wd = w.get(d);
        if wd == 0.0 {
            continue;
        }
        let sq: f64 = masks.range(d).map(|i| (e1[i] - e2[i]) * (e1[i] - e2[i])).sum();
        total += wd * sq;
    }
    Ok(total.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub track_id: String,
    pub genre: BTreeSet<String>,
    pub mood: BTreeSet<String>,
    pub instruments: BTreeSet<String>,
    pub bpm: f64,
    pub audio_path: String,
    #[serde(skip)]
    pub embedding: EmbeddingVector,
}

impl IndexEntry {
    fn from_track(t: &TrackMetadata, embedding: EmbeddingVector) -> Self {
        Self {
            track_id: t.track_id.clone(),
            genre: t.genre.clone(),
            mood: t.mood.clone(),
            instruments: t.instruments.clone(),
            bpm: t.tempo_bpm,
            audio_path: t.audio_path.clone(),
            embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Track(String),
    Embedding(EmbeddingVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub track_id: String,
    pub distance: f64,
}

/// Immutable after build; entries are sorted by track id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<IndexEntry>,
    masks: MaskSet,
    /// SHA-256 of the serialized checkpoint the vectors came from.
    pub fingerprint: String,
    pub config_hash: String,
    pub features: FeatureConfig,
    /// Seconds since the Unix epoch.
    pub built_at: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    kind: String,
    fingerprint: String,
    config_hash: String,
    features: FeatureConfig,
    built_at: u64,
    embedding_dim: usize,
    tracks: Vec<IndexEntry>,
}

const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Fingerprint tying an index to the exact checkpoint it was built from.
pub fn checkpoint_fingerprint(ckpt: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(ckpt.to_container()?.to_bytes()?)))
}

/// Rounds through `f32` so an index behaves identically before and after a
/// save/load round trip.
fn storage_precision(e: EmbeddingVector) -> EmbeddingVector {
    EmbeddingVector::new(e.values.into_iter().map(|v| v as f32 as f64).collect())
}

/// Embeds every track with the checkpoint. Tracks whose audio cannot be read
/// or is shorter than one patch are returned as failures.
pub fn build_index(corpus: &Corpus, ckpt: &Checkpoint, built_at: u64) -> Result<(EmbeddingIndex, Vec<(String, Error)>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot index an empty corpus".into()));
    }
    let (store, mut failures) = FeatureStore::from_corpus(corpus, &ckpt.features)?;
    let embedder = Embedder::new(&ckpt.params)?;
    let source = ModelSource::new(&embedder, &store);
    let mut entries = Vec::with_capacity(corpus.len());
    for t in corpus.tracks() {
        if store.frames(&t.track_id).is_none() {
            continue;
        }
        match source.song(&t.track_id) {
            Ok(e) => entries.push(IndexEntry::from_track(t, e)),
            Err(e) => failures.push((t.track_id.clone(), e)),
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!("all {} tracks failed to embed", corpus.len())));
    }
    entries.sort_by(|a, b| a.track_id.cmp(&b.track_id));
    failures.sort_by(|a, b| a.0.cmp(&b.0));
    let index = EmbeddingIndex::new(
        entries,
        checkpoint_fingerprint(ckpt)?,
        ckpt.config_hash(),
        ckpt.features.clone(),
        built_at,
    )?;
    Ok((index, failures))
}

impl EmbeddingIndex {
    /// Vectors are rounded to `f32` storage precision on the way in.
    pub fn new(
        mut entries: Vec<IndexEntry>,
        fingerprint: String,
        config_hash: String,
        features: FeatureConfig,
        built_at: u64,
    ) -> Result<Self> {
        let dim = entries
            .first()
            .map(|e| e.embedding.len())
            .ok_or_else(|| Error::InvalidInput("an index needs at least one track".into()))?;
        entries.sort_by(|a, b| a.track_id.cmp(&b.track_id));
        for pair in entries.windows(2) {
            if pair[0].track_id == pair[1].track_id {
                return Err(Error::Validation(format!("duplicate track '{}'", pair[0].track_id)));
            }
        }
        for e in &mut entries {
            e.embedding = storage_precision(std::mem::take(&mut e.embedding));
            if e.embedding.len() != dim {
                return Err(Error::Shape(format!("track '{}' has a {}-d vector, expected {dim}", e.track_id, e.embedding.len())));
            }
            if (e.embedding.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Validation(format!("track '{}' vector is not unit length", e.track_id)));
            }
        }
        Ok(Self {
            entries,
            masks: MaskSet::new(dim)?,
            fingerprint,
            config_hash,
            features,
            built_at,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn get(&self, track_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.track_id.as_str().cmp(track_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Checks that `ckpt` is the model this index was built with.
    pub fn check_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        if checkpoint_fingerprint(ckpt)? != self.fingerprint {
            return Err(Error::Validation("checkpoint does not match the index fingerprint".into()));
        }
        Ok(())
    }

    /// The `k` nearest tracks by weighted distance, ascending, ties broken by
    /// track id. A track query is excluded from its own results when
    /// `exclude_query` is set. Fewer than `k` hits is not an error.
    pub fn query(&self, q: &Query, w: &WeightProfile, k: usize, exclude_query: bool) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        w.validate()?;
        let (target, skip) = match q {
            Query::Track(id) => {
                let e = self
                    .get(id)
                    .ok_or_else(|| Error::NotFound(format!("track '{id}' is not in the index")))?;
                (&e.embedding, exclude_query.then_some(id.as_str()))
            }
            Query::Embedding(e) => (e, None),
        };
        let mut hits = self
            .entries
            .iter()
            .filter(|e| Some(e.track_id.as_str()) != skip)
            .map(|e| {
                Ok(Hit {
                    track_id: e.track_id.clone(),
                    distance: weighted_distance(&target.values, &e.embedding.values, w, &self.masks)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.track_id.cmp(&b.track_id)));
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_container(&self) -> Result<Container> {
        let dim = self.masks.dim();
        let meta = IndexMeta {
            kind: "embedding_index".into(),
            fingerprint: self.fingerprint.clone(),
            config_hash: self.config_hash.clone(),
            features: self.features.clone(),
            built_at: self.built_at,
            embedding_dim: dim,
            tracks: self.entries.clone(),
        };
        let data = self
            .entries
            .iter()
            .flat_map(|e| e.embedding.values.iter().map(|&v| v as f32))
            .collect();
        Ok(Container {
            meta: serde_json::to_value(meta)?,
            arrays: vec![NamedArray {
                name: "embeddings".into(),
                shape: vec![self.entries.len(), dim],
                data,
            }],
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: IndexMeta = serde_json::from_value(c.meta)?;
        if meta.kind != "embedding_index" {
            return Err(Error::Container(format!("expected an embedding index, found '{}'", meta.kind)));
        }
        let arr = c
            .arrays
            .iter()
            .find(|a| a.name == "embeddings")
            .ok_or_else(|| Error::Container("missing array 'embeddings'".into()))?;
        let dim = meta.embedding_dim;
        if arr.shape != [meta.tracks.len(), dim] {
            return Err(Error::Shape(format!("embeddings are {:?}, expected [{}, {dim}]", arr.shape, meta.tracks.len())));
        }
        let entries = meta
            .tracks
            .into_iter()
            .zip(arr.data.chunks(dim.max(1)))
            .map(|(mut e, row)| {
                e.embedding = EmbeddingVector::new(row.iter().map(|&v| v as f64).collect());
                e
            })
            .collect();
        Self::new(entries, meta.fingerprint, meta.config_hash, meta.features, meta.built_at)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

/// Embeds an uploaded clip like a whole song. Clips shorter than one patch
/// are rejected.
pub fn embed_clip(w: &Waveform, ckpt: &Checkpoint, embedder: &Embedder) -> Result<EmbeddingVector> {
    let w = if w.sample_rate() == ckpt.features.sample_rate {
        w.clone()
    } else {
        w.resample(ckpt.features.sample_rate)?
    };
    song_embedding(&w, &ckpt.features, embedder).map(storage_precision)
}
