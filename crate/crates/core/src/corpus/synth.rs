//! Synthetic corpus with four independently assigned, exactly known factors.
//!
//! Each track is the sum of three layers:
//! * a lead voice whose partial layout is the instrument factor and whose
//!   pitch/amplitude modulation is the mood factor,
//! * a background texture (the genre factor),
//! * a beat train at the tempo factor's BPM: a 55 Hz kick, below every
//!   other layer, plus a short broadband click.
//!
//! Per-track nuisance variation (lead pitch, click phase, noise seeds) makes
//! tracks with identical factors distinguishable from each other.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::metadata::{Corpus, Split, TrackMetadata, Vocabulary};
use super::split::{split_ids, SplitRatios};
use crate::audio::Waveform;
use crate::dimension::Dimension;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// No background layer.
    Clean,
    /// Stationary broadband noise.
    Hiss,
    /// Sparse short tonal blips at random times and pitches.
    Crackle,
    /// Band-limited noise gated at 12 Hz.
    Flutter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Steady,
    /// Deep amplitude modulation at 5 Hz.
    Tremolo,
    /// Repeated upward octave glides, 0.6 s each.
    Sweep,
    /// Pitch steps through a triad every 150 ms.
    Stepped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarmonicTemplate {
    Pure,
    Odd,
    Full,
    Bell,
    Octaves,
}

impl HarmonicTemplate {
    fn partials(self) -> Vec<(f64, f64)> {
        match self {
            HarmonicTemplate::Pure => vec![(1.0, 1.0), (2.0, 0.15)],
            HarmonicTemplate::Odd => [1, 3, 5, 7, 9, 11].iter().map(|&k| (k as f64, 1.0 / k as f64)).collect(),
            HarmonicTemplate::Full => (1..=12).map(|k| (k as f64, 1.0 / k as f64)).collect(),
            HarmonicTemplate::Bell => vec![(1.0, 1.0), (2.76, 0.6), (5.40, 0.4), (8.93, 0.25), (13.34, 0.15)],
            HarmonicTemplate::Octaves => vec![(1.0, 1.0), (2.0, 0.7), (4.0, 0.5), (8.0, 0.35)],
        }
    }
}

/// Factor levels and corpus size. Level `i` of a factor is labeled with the
/// `i`-th tag of the matching vocabulary category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub tracks: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    pub genre_levels: Vec<Texture>,
    pub mood_levels: Vec<Modulation>,
    pub instrument_levels: Vec<HarmonicTemplate>,
    pub tempo_levels_bpm: Vec<f64>,
    /// Uniform per-track tempo jitter, +/- this many BPM.
    pub tempo_jitter_bpm: f64,
    pub split_ratios: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tracks: 200,
            duration_secs: 6.0,
            sample_rate: 22_050,
            genre_levels: vec![Texture::Clean, Texture::Hiss, Texture::Crackle, Texture::Flutter],
            mood_levels: vec![Modulation::Steady, Modulation::Tremolo, Modulation::Sweep, Modulation::Stepped],
            instrument_levels: vec![
                HarmonicTemplate::Pure,
                HarmonicTemplate::Odd,
                HarmonicTemplate::Full,
                HarmonicTemplate::Bell,
            ],
            tempo_levels_bpm: vec![60.0, 90.0, 135.0, 200.0],
            tempo_jitter_bpm: 1.5,
            split_ratios: [0.7, 0.1, 0.2],
        }
    }
}

impl SynthSpec {
    pub fn level_counts(&self) -> [usize; 4] {
        [
            self.genre_levels.len(),
            self.mood_levels.len(),
            self.instrument_levels.len(),
            self.tempo_levels_bpm.len(),
        ]
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (d, n) in Dimension::ALL.into_iter().zip(self.level_counts()) {
            if n < 2 {
                return Err(Error::Config(format!("factor {d} needs at least 2 levels, got {n}")));
            }
            if let Some(tags) = vocab.tags(d) {
                if n > tags.len() {
                    return Err(Error::Config(format!(
                        "factor {d} has {n} levels but the vocabulary only {} tags",
                        tags.len()
                    )));
                }
            }
        }
        let mut bpm = self.tempo_levels_bpm.clone();
        bpm.sort_by(f64::total_cmp);
        if bpm.iter().any(|b| !(b.is_finite() && *b > 2.0 * self.tempo_jitter_bpm)) {
            return Err(Error::Config("tempo levels must be positive and exceed the jitter".into()));
        }
        // Distinct levels must never count as tempo-similar and equal levels always must.
        let min_gap = bpm.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if min_gap <= super::metadata::TEMPO_TOLERANCE_BPM + 2.0 * self.tempo_jitter_bpm
            || 2.0 * self.tempo_jitter_bpm > super::metadata::TEMPO_TOLERANCE_BPM
        {
            return Err(Error::Config(
                "tempo levels too close for the jitter: similarity would not follow the factor".into(),
            ));
        }
        if self.tracks == 0 || !(self.duration_secs > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config("tracks, duration_secs and sample_rate must be positive".into()));
        }
        SplitRatios(self.split_ratios).validate()
    }
}

/// Factor level indices of one track, in genre, mood, instruments, tempo order.
pub type FactorLevels = [usize; 4];

#[derive(Debug, Clone)]
pub struct SyntheticTrack {
    pub meta: TrackMetadata,
    pub factors: FactorLevels,
    pub waveform: Waveform,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub tracks: Vec<SyntheticTrack>,
}

impl SyntheticCorpus {
    pub fn corpus(&self, vocab: &Vocabulary) -> Result<Corpus> {
        Corpus::new(self.tracks.iter().map(|t| t.meta.clone()).collect(), vocab)
    }

    pub fn waveforms(&self) -> impl Iterator<Item = (&str, &Waveform)> {
        self.tracks.iter().map(|t| (t.meta.track_id.as_str(), &t.waveform))
    }
}

/// Factor assignments: consecutive shuffled passes over the full factorial
/// design, so every pair of factors is (close to) exactly balanced.
pub fn assign_factors(counts: [usize; 4], n: usize, rng: &mut impl Rng) -> Vec<FactorLevels> {
    let total: usize = counts.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut combos: Vec<usize> = (0..total).collect();
        combos.shuffle(rng);
        for c in combos.into_iter().take(n - out.len()) {
            let mut rest = c;
            let mut levels = [0; 4];
            for (l, &k) in levels.iter_mut().zip(&counts) {
                *l = rest % k;
                rest /= k;
            }
            out.push(levels);
        }
    }
    out
}

pub fn generate_synthetic_corpus(spec: &SynthSpec, vocab: &Vocabulary, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = assign_factors(spec.level_counts(), spec.tracks, &mut rng);
    let ids: Vec<String> = (0..spec.tracks).map(|i| format!("synth-{i:04}")).collect();
    let splits = split_ids(&ids, SplitRatios(spec.split_ratios), seed ^ 0x5eed_5717)?;
    let tracks = ids
        .iter()
        .zip(&factors)
        .enumerate()
        .map(|(i, (id, &f))| {
            let mut track_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            let jitter = track_rng.random_range(-spec.tempo_jitter_bpm..=spec.tempo_jitter_bpm);
            let bpm = spec.tempo_levels_bpm[f[3]] + jitter;
            let samples = render_track(
                spec,
                spec.genre_levels[f[0]],
                spec.mood_levels[f[1]],
                spec.instrument_levels[f[2]],
                bpm,
                &mut track_rng,
            );
            let tag = |list: &[String], l: usize| std::iter::once(list[l].clone()).collect();
            let meta = TrackMetadata {
                track_id: id.clone(),
                audio_path: format!("audio/{id}.wav"),
                genre: tag(&vocab.genre, f[0]),
                mood: tag(&vocab.mood, f[1]),
                instruments: tag(&vocab.instruments, f[2]),
                tempo_bpm: (bpm * 100.0).round() / 100.0,
                split: splits.get(id).copied().unwrap_or(Split::Train),
            };
            Ok(SyntheticTrack {
                meta,
                factors: f,
                waveform: Waveform::new(samples, spec.sample_rate)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus { tracks })
}

fn render_track(
    spec: &SynthSpec,
    texture: Texture,
    modulation: Modulation,
    template: HarmonicTemplate,
    bpm: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = spec.sample_rate as f64;
    let n = (spec.duration_secs * sr).round() as usize;
    let mut out = vec![0.0f64; n];
    add_lead(&mut out, sr, modulation, template, rng);
    add_texture(&mut out, sr, texture, rng);
    add_beats(&mut out, sr, bpm, rng);
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    out.into_iter().map(|v| (v * gain) as f32).collect()
}

fn add_lead(out: &mut [f64], sr: f64, modulation: Modulation, template: HarmonicTemplate, rng: &mut ChaCha8Rng) {
    let f0 = 130.0 * 2f64.powf(rng.random::<f64>());
    let partials = template.partials();
    let norm = partials.iter().map(|(_, a)| a * a).sum::<f64>().sqrt();
    let phases: Vec<f64> = partials.iter().map(|_| rng.random::<f64>() * TAU).collect();
    let mod_phase = rng.random::<f64>();
    let mut acc = vec![0.0f64; partials.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let (pitch, amp) = match modulation {
            Modulation::Steady => (1.0, 1.0),
            Modulation::Tremolo => {
                let g = 0.5 + 0.5 * (TAU * (5.0 * t + mod_phase)).sin();
                (1.0, g * g)
            }
            Modulation::Sweep => (2f64.powf((t / 0.6 + mod_phase).fract()), 1.0),
            Modulation::Stepped => {
                const STEPS: [f64; 4] = [1.0, 1.26, 1.5, 1.26];
                (STEPS[((t / 0.15 + 4.0 * mod_phase) as usize) % 4], 1.0)
            }
        };
        let mut s = 0.0;
        for (k, &(ratio, a)) in partials.iter().enumerate() {
            let f = f0 * pitch * ratio;
            acc[k] += TAU * f / sr;
            if f < 0.45 * sr {
                s += a * (acc[k] + phases[k]).sin();
            }
        }
        *o += 0.35 * amp * s / norm;
    }
}

fn add_texture(out: &mut [f64], sr: f64, texture: Texture, rng: &mut ChaCha8Rng) {
    let n = out.len();
    match texture {
        Texture::Clean => {}
        Texture::Hiss => {
            for o in out.iter_mut() {
                let v: f64 = StandardNormal.sample(rng);
                *o += 0.03 * v;
            }
        }
        Texture::Crackle => {
            let rate = 30.0;
            let mut t = 0.0;
            loop {
                t += -(1.0 - rng.random::<f64>()).ln() / rate;
                let start = (t * sr) as usize;
                if start >= n {
                    break;
                }
                let f = 1000.0 * 5f64.powf(rng.random::<f64>());
                let len = (0.006 * sr) as usize;
                for j in 0..len.min(n - start) {
                    let w = (std::f64::consts::PI * j as f64 / len as f64).sin();
                    out[start + j] += 0.3 * w * w * (TAU * f * j as f64 / sr).sin();
                }
            }
        }
        Texture::Flutter => {
            // Band-pass noise (difference of two one-pole smoothers), gated at 12 Hz.
            let (a1, a2) = ((-TAU * 4000.0 / sr).exp(), (-TAU * 1500.0 / sr).exp());
            let (mut l1, mut l2) = (0.0f64, 0.0f64);
            let phase = rng.random::<f64>();
            for (i, o) in out.iter_mut().enumerate() {
                let v: f64 = StandardNormal.sample(rng);
                l1 = a1 * l1 + (1.0 - a1) * v;
                l2 = a2 * l2 + (1.0 - a2) * v;
                let gate = if (12.0 * i as f64 / sr + phase).fract() < 0.5 { 1.0 } else { 0.0 };
                *o += 0.25 * gate * (l1 - l2);
            }
        }
    }
}

fn add_beats(out: &mut [f64], sr: f64, bpm: f64, rng: &mut ChaCha8Rng) {
    let period = 60.0 / bpm;
    let kick_len = (0.25 * sr) as usize;
    let (kick_tau, click_tau) = (0.07 * sr, 0.003 * sr);
    let mut t = rng.random::<f64>() * period;
    let n = out.len();
    while ((t * sr) as usize) < n {
        let start = (t * sr) as usize;
        for j in 0..kick_len.min(n - start) {
            let x = j as f64;
            let mut v = 0.9 * (TAU * 55.0 * x / sr).sin() * (-x / kick_tau).exp();
            if x < 4.0 * click_tau {
                let noise: f64 = StandardNormal.sample(rng);
                v += 0.25 * noise * (-x / click_tau).exp();
            }
            out[start + j] += v;
        }
        t += period;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::metadata::similar;

    #[test]
    fn too_few_levels_rejected() {
        let spec = SynthSpec {
            mood_levels: vec![Modulation::Steady],
            ..SynthSpec::default()
        };
        assert!(generate_synthetic_corpus(&spec, &Vocabulary::builtin(), 1).is_err());
    }

    #[test]
    fn labels_follow_factors() {
        let spec = SynthSpec {
            tracks: 24,
            duration_secs: 0.5,
            ..SynthSpec::default()
        };
        let vocab = Vocabulary::builtin();
        let c = generate_synthetic_corpus(&spec, &vocab, 4).unwrap();
        for a in &c.tracks {
            for b in &c.tracks {
                for d in Dimension::ALL {
                    assert_eq!(
                        similar(&a.meta, &b.meta, d),
                        a.factors[d.index()] == b.factors[d.index()],
                        "{d} {} {}",
                        a.meta.track_id,
                        b.meta.track_id
                    );
                }
            }
        }
        let again = generate_synthetic_corpus(&spec, &vocab, 4).unwrap();
        assert_eq!(c.tracks[3].waveform, again.tracks[3].waveform);
        assert!(c.corpus(&vocab).is_ok());
    }
}
