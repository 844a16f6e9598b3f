use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use super::metadata::Corpus;
use super::sampler::SampleRef;
use crate::audio::{read_wav, Waveform};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor, SpectrogramPatch};

#[derive(Debug, Clone)]
struct Series {
    frames: usize,
    values: Vec<f32>,
}

/// Standardized log-mel series per track, held in memory for patch lookup.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    cfg: FeatureConfig,
    series: HashMap<String, Series>,
}

impl FeatureStore {
    pub fn new(cfg: FeatureConfig) -> Self {
        Self {
            cfg,
            series: HashMap::new(),
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn insert_series(&mut self, id: &str, log_mel: &SpectrogramPatch) -> Result<()> {
        let standardized = if log_mel.is_standardized() {
            log_mel.clone()
        } else {
            log_mel.standardize(&self.cfg)?
        };
        self.series.insert(
            id.to_string(),
            Series {
                frames: standardized.frames(),
                values: standardized.values().iter().map(|&v| v as f32).collect(),
            },
        );
        Ok(())
    }

    pub fn insert_waveform(&mut self, id: &str, w: &Waveform) -> Result<()> {
        let s = FeatureExtractor::new(self.cfg.clone())?.log_mel(w)?;
        self.insert_series(id, &s)
    }

    /// Extracts features for many waveforms in parallel.
    pub fn extend_waveforms<'a>(&mut self, items: impl IntoParallelIterator<Item = (&'a str, &'a Waveform)>) -> Result<()> {
        let ex = FeatureExtractor::new(self.cfg.clone())?;
        let done: Vec<(String, SpectrogramPatch)> = items
            .into_par_iter()
            .map(|(id, w)| Ok((id.to_string(), ex.log_mel(w)?)))
            .collect::<Result<_>>()?;
        for (id, s) in done {
            self.insert_series(&id, &s)?;
        }
        Ok(())
    }

    /// Reads every track's audio. Unreadable or too-short tracks are reported
    /// and skipped.
    pub fn from_corpus(corpus: &Corpus, cfg: &FeatureConfig) -> Result<(Self, Vec<(String, Error)>)> {
        let ex = FeatureExtractor::new(cfg.clone())?;
        let results: Vec<(String, Result<SpectrogramPatch>)> = corpus
            .tracks()
            .par_iter()
            .map(|t| {
                let r = read_wav(Path::new(&t.audio_path), cfg.sample_rate).and_then(|w| ex.log_mel(&w));
                (t.track_id.clone(), r)
            })
            .collect();
        let mut store = Self::new(cfg.clone());
        let mut failures = Vec::new();
        for (id, r) in results {
            match r {
                Ok(s) => store.insert_series(&id, &s)?,
                Err(e) => failures.push((id, e)),
            }
        }
        Ok((store, failures))
    }

    pub fn frames(&self, id: &str) -> Option<usize> {
        self.series.get(id).map(|s| s.frames)
    }

    fn get(&self, id: &str) -> Result<&Series> {
        self.series
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("no features for track '{id}'")))
    }

    /// Copies the standardized model-sized patch at `r` into `out`.
    pub fn write_patch_f32(&self, r: &SampleRef, out: &mut [f32]) -> Result<()> {
        let s = self.get(&r.track)?;
        let (p, b) = (self.cfg.patch_frames, self.cfg.mel_bands);
        if r.start + p > s.frames {
            return Err(Error::InvalidInput(format!(
                "patch [{}, {}) outside track '{}' of {} frames",
                r.start,
                r.start + p,
                r.track,
                s.frames
            )));
        }
        out[..p * b].copy_from_slice(&s.values[r.start * b..(r.start + p) * b]);
        Ok(())
    }

    pub fn patch(&self, r: &SampleRef) -> Result<SpectrogramPatch> {
        let (p, b) = (self.cfg.patch_frames, self.cfg.mel_bands);
        let mut buf = vec![0f32; p * b];
        self.write_patch_f32(r, &mut buf)?;
        let full = SpectrogramPatch::from_values(p, b, buf.iter().map(|&v| v as f64).collect(), true)?;
        Ok(full)
    }

    /// Non-overlapping patch start frames covering the track from the start.
    pub fn window_starts(&self, id: &str) -> Result<Vec<usize>> {
        let frames = self.get(id)?.frames;
        let p = self.cfg.patch_frames;
        if frames < p {
            return Err(Error::InsufficientAudio(format!(
                "track '{id}' has {frames} frames, fewer than one {p}-frame patch"
            )));
        }
        Ok((0..=(frames - p) / p).map(|i| i * p).collect())
    }
}
