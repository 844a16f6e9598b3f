//! Log-mel patches for the embedding network and MFCC+delta frames for the
//! vector-quantization baseline.
//!
//! Conventions: Hann window, magnitude spectrum scaled so a full-scale sinusoid
//! peaks at its amplitude, HTK mel scale with unnormalized triangular filters
//! spanning 0 Hz to Nyquist, no centering (frame `t` starts at sample `t * hop`).

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub mel_bands: usize,
    pub patch_frames: usize,
    /// `c` in `log10(1 + c * S)`.
    pub compression_scale: f64,
    pub standardize_mean: f64,
    pub standardize_std: f64,
    pub mfcc_coefficients: usize,
    /// Odd number of frames in the symmetric delta regression window.
    pub delta_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22_050,
            window_samples: 512,
            hop_samples: 256,
            mel_bands: 128,
            patch_frames: 129,
            compression_scale: 10.0,
            standardize_mean: 0.2,
            standardize_std: 0.25,
            mfcc_coefficients: 13,
            delta_window: 9,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.window_samples < 2 || self.hop_samples == 0 {
            return bad("window_samples must be >= 2 and hop_samples >= 1");
        }
        if self.mel_bands == 0 || self.patch_frames == 0 {
            return bad("mel_bands and patch_frames must be positive");
        }
        if self.standardize_std <= 0.0 || self.compression_scale <= 0.0 {
            return bad("standardize_std and compression_scale must be positive");
        }
        if self.delta_window < 3 || self.delta_window % 2 == 0 {
            return bad("delta_window must be odd and >= 3");
        }
        if self.mfcc_coefficients == 0 || self.mfcc_coefficients > self.mel_bands {
            return bad("mfcc_coefficients must be in 1..=mel_bands");
        }
        Ok(())
    }

    /// Loads a config from `.toml` or `.json`; missing fields take defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_samples {
            0
        } else {
            (len - self.window_samples) / self.hop_samples + 1
        }
    }

    /// Samples needed to produce exactly `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_samples + self.window_samples
        }
    }
}

/// Half-open frame interval `[start, end)` in the source series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameInterval {
    pub start: usize,
    pub end: usize,
}

impl FrameInterval {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &FrameInterval) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }
}

/// Time-major `frames x bands` log-mel matrix. A full-length series and a
/// fixed-size model input share this type; patches remember where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramPatch {
    frames: usize,
    bands: usize,
    values: Vec<f64>,
    standardized: bool,
    source: Option<FrameInterval>,
}

impl SpectrogramPatch {
    pub fn from_values(frames: usize, bands: usize, values: Vec<f64>, standardized: bool) -> Result<Self> {
        if values.len() != frames * bands {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{bands} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            bands,
            values,
            standardized,
            source: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn source(&self) -> Option<FrameInterval> {
        self.source
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.bands..(frame + 1) * self.bands]
    }

    pub fn get(&self, frame: usize, band: usize) -> f64 {
        self.values[frame * self.bands + band]
    }

    /// Maps every value `v` to `(v - mean) / std`.
    pub fn standardize(&self, cfg: &FeatureConfig) -> Result<SpectrogramPatch> {
        if self.standardized {
            return Err(Error::InvalidInput("spectrogram is already standardized".into()));
        }
        let (mean, std) = (cfg.standardize_mean, cfg.standardize_std);
        Ok(Self {
            values: self.values.iter().map(|v| (v - mean) / std).collect(),
            standardized: true,
            ..self.clone()
        })
    }

    pub fn unstandardize(&self, cfg: &FeatureConfig) -> Result<SpectrogramPatch> {
        if !self.standardized {
            return Err(Error::InvalidInput("spectrogram is not standardized".into()));
        }
        let (mean, std) = (cfg.standardize_mean, cfg.standardize_std);
        Ok(Self {
            values: self.values.iter().map(|v| v * std + mean).collect(),
            standardized: false,
            ..self.clone()
        })
    }

    /// Contiguous `len`-frame slice starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<SpectrogramPatch> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InvalidInput(format!(
                "patch [{start}, {}) outside a series of {} frames",
                start + len,
                self.frames
            )));
        }
        let base = self.source.map(|s| s.start).unwrap_or(0);
        Ok(Self {
            frames: len,
            bands: self.bands,
            values: self.values[start * self.bands..(start + len) * self.bands].to_vec(),
            standardized: self.standardized,
            source: Some(FrameInterval {
                start: base + start,
                end: base + start + len,
            }),
        })
    }
}

/// Extracts the model-sized patch (`cfg.patch_frames` frames) at `start_frame`.
pub fn extract_patch(series: &SpectrogramPatch, start_frame: usize, cfg: &FeatureConfig) -> Result<SpectrogramPatch> {
    series.slice(start_frame, cfg.patch_frames)
}

pub fn standardize(p: &SpectrogramPatch, cfg: &FeatureConfig) -> Result<SpectrogramPatch> {
    p.standardize(cfg)
}

/// `frames x 39` matrix: 13 MFCCs followed by their deltas and delta-deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrameSeries {
    frames: usize,
    width: usize,
    values: Vec<f64>,
}

impl MfccFrameSeries {
    pub fn from_values(frames: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * width {
            return Err(Error::Shape(format!("{} values for {frames}x{width} MFCC frames", values.len())));
        }
        Ok(Self { frames, width, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.width..(frame + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.width)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// HTK triangular filterbank over the non-negative FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per band: first bin index and the contiguous nonzero weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    n_bins: usize,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32) -> Self {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let max_mel = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(max_mel * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..n_mels)
            .map(|m| {
                let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= center {
                        (f - lo) / (center - lo)
                    } else if f > center && f < hi {
                        (hi - f) / (hi - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first.get_or_insert(k);
                        weights.push(w);
                    } else if first.is_some() {
                        break;
                    }
                }
                (first.unwrap_or(0), weights)
            })
            .collect();
        Self {
            filters,
            centers_hz: edges[1..=n_mels].to_vec(),
            n_bins,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.centers_hz[band]
    }

    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        debug_assert_eq!(spectrum.len(), self.n_bins);
        for (o, (start, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&spectrum[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Reusable STFT + mel machinery for one [`FeatureConfig`].
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    window: Vec<f64>,
    scale: f64,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_samples;
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let scale = 2.0 / window.iter().sum::<f64>();
        let fft = FftPlanner::new().plan_fft_forward(n);
        let filterbank = MelFilterbank::new(cfg.mel_bands, n, cfg.sample_rate);
        Ok(Self {
            cfg,
            window,
            scale,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    fn check(&self, w: &Waveform) -> Result<usize> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "waveform at {} Hz, features configured for {} Hz",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        if w.samples().iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        let frames = self.cfg.frame_count(w.len());
        if frames == 0 {
            return Err(Error::InsufficientAudio(format!(
                "{} samples, need at least one {}-sample window",
                w.len(),
                self.cfg.window_samples
            )));
        }
        Ok(frames)
    }

    /// Linear mel magnitudes, `frames x mel_bands`, time-major.
    pub fn mel_magnitudes(&self, w: &Waveform) -> Result<(usize, Vec<f64>)> {
        let frames = self.check(w)?;
        let n = self.cfg.window_samples;
        let n_bins = n / 2 + 1;
        let bands = self.cfg.mel_bands;
        let mut out = vec![0.0; frames * bands];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0; n_bins];
        let samples = w.samples();
        for t in 0..frames {
            let offset = t * self.cfg.hop_samples;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(samples[offset + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm() * self.scale;
            }
            self.filterbank.apply(&mag, &mut out[t * bands..(t + 1) * bands]);
        }
        Ok((frames, out))
    }

    /// Unstandardized `log10(1 + c * S)` series.
    pub fn log_mel(&self, w: &Waveform) -> Result<SpectrogramPatch> {
        let (frames, mut mel) = self.mel_magnitudes(w)?;
        let c = self.cfg.compression_scale;
        for v in &mut mel {
            *v = (1.0 + c * *v).log10();
        }
        SpectrogramPatch::from_values(frames, self.cfg.mel_bands, mel, false)
    }

    pub fn mfcc(&self, w: &Waveform) -> Result<MfccFrameSeries> {
        let (frames, mel) = self.mel_magnitudes(w)?;
        let bands = self.cfg.mel_bands;
        let n_coef = self.cfg.mfcc_coefficients;
        let dct = dct2_ortho_matrix(n_coef, bands);
        let mut coeffs = vec![0.0; frames * n_coef];
        let mut log_row = vec![0.0; bands];
        for t in 0..frames {
            for (l, v) in log_row.iter_mut().zip(&mel[t * bands..(t + 1) * bands]) {
                *l = v.max(1e-10).ln();
            }
            for k in 0..n_coef {
                coeffs[t * n_coef + k] = dct[k * bands..(k + 1) * bands]
                    .iter()
                    .zip(&log_row)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let half = self.cfg.delta_window / 2;
        let d1 = deltas(&coeffs, frames, n_coef, half);
        let d2 = deltas(&d1, frames, n_coef, half);
        let width = 3 * n_coef;
        let mut values = Vec::with_capacity(frames * width);
        for t in 0..frames {
            let r = t * n_coef..(t + 1) * n_coef;
            values.extend_from_slice(&coeffs[r.clone()]);
            values.extend_from_slice(&d1[r.clone()]);
            values.extend_from_slice(&d2[r]);
        }
        MfccFrameSeries::from_values(frames, width, values)
    }
}

/// Orthonormal DCT-II basis, `n_out x n_in` row-major.
fn dct2_ortho_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let n = n_in as f64;
    let mut m = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            m[k * n_in + i] = norm * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos();
        }
    }
    m
}

/// Symmetric regression deltas with edge replication.
fn deltas(x: &[f64], frames: usize, width: usize, half: usize) -> Vec<f64> {
    let denom = 2.0 * (1..=half).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; x.len()];
    let last = frames as isize - 1;
    for t in 0..frames as isize {
        for n in 1..=half as isize {
            let fwd = (t + n).min(last) as usize;
            let back = (t - n).max(0) as usize;
            for j in 0..width {
                out[t as usize * width + j] += n as f64 * (x[fwd * width + j] - x[back * width + j]);
            }
        }
    }
    for v in &mut out {
        *v /= denom;
    }
    out
}

pub fn compute_log_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<SpectrogramPatch> {
    FeatureExtractor::new(cfg.clone())?.log_mel(w)
}

pub fn compute_mfcc(w: &Waveform, cfg: &FeatureConfig) -> Result<MfccFrameSeries> {
    FeatureExtractor::new(cfg.clone())?.mfcc(w)
}
