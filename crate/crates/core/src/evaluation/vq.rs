//! MFCC bag-of-frames baseline: a K-means codebook over MFCC+delta frames and
//! per-track normalized assignment histograms compared by Euclidean distance.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EmbeddingSource;
use crate::container::{Container, NamedArray};
use crate::corpus::SampleRef;
use crate::error::{Error, Result};
use crate::features::MfccFrameSeries;
use crate::model::nn::matmul;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub k: usize,
    /// Frames drawn at random (without replacement) from all tracks for fitting.
    pub sample_frames: usize,
    /// Stop once no centroid moves farther than this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Z-score each coefficient with statistics of the fitting sample.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            k: 1024,
            sample_frames: 2_500_000,
            tolerance: 1e-4,
            max_iterations: 300,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqCodebook {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, in the (optionally standardized) frame space.
    pub centroids: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub training_frames: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookMeta {
    kind: String,
    k: usize,
    dim: usize,
    training_frames: usize,
    iterations: usize,
    seed: u64,
}

impl VqCodebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    fn normalize_frame(&self, frame: &[f64], out: &mut [f64]) {
        for (((o, &v), &m), &s) in out.iter_mut().zip(frame).zip(&self.mean).zip(&self.scale) {
            *o = (v - m) / s;
        }
    }

    /// Nearest centroid per frame (ties go to the lower index).
    pub fn assign(&self, frames: &[f64]) -> Result<Vec<usize>> {
        if frames.len() % self.dim != 0 {
            return Err(Error::Shape(format!("frame buffer is not a multiple of {}", self.dim)));
        }
        let mut normalized = vec![0.0; frames.len()];
        for (src, dst) in frames.chunks(self.dim).zip(normalized.chunks_mut(self.dim)) {
            self.normalize_frame(src, dst);
        }
        Ok(nearest(&normalized, self.dim, &self.centroids, self.k).0)
    }

    /// Stored in `f32`; fitted values are rounded on save.
    pub fn to_container(&self) -> Result<Container> {
        let meta = CodebookMeta {
            kind: "vq_codebook".into(),
            k: self.k,
            dim: self.dim,
            training_frames: self.training_frames,
            iterations: self.iterations,
            seed: self.seed,
        };
        let arr = |name: &str, shape: Vec<usize>, v: &[f64]| NamedArray {
            name: name.into(),
            shape,
            data: v.iter().map(|&x| x as f32).collect(),
        };
        Ok(Container {
            meta: serde_json::to_value(meta)?,
            arrays: vec![
                arr("centroids", vec![self.k, self.dim], &self.centroids),
                arr("mean", vec![self.dim], &self.mean),
                arr("scale", vec![self.dim], &self.scale),
            ],
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CodebookMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != "vq_codebook" {
            return Err(Error::Container(format!("expected a VQ codebook, found '{}'", meta.kind)));
        }
        let get = |name: &str, len: usize| -> Result<Vec<f64>> {
            let a = c
                .array(name)
                .ok_or_else(|| Error::Container(format!("missing array '{name}'")))?;
            if a.data.len() != len {
                return Err(Error::Shape(format!("array '{name}' has {} values, expected {len}", a.data.len())));
            }
            Ok(a.data.iter().map(|&v| v as f64).collect())
        };
        Ok(Self {
            centroids: get("centroids", meta.k * meta.dim)?,
            mean: get("mean", meta.dim)?,
            scale: get("scale", meta.dim)?,
            k: meta.k,
            dim: meta.dim,
            training_frames: meta.training_frames,
            iterations: meta.iterations,
            seed: meta.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

const ASSIGN_CHUNK: usize = 2048;

/// Nearest centroid and squared distance for every row of `x`.
fn nearest(x: &[f64], dim: usize, centroids: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let c_norms: Vec<f64> = centroids.chunks(dim).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let parts: Vec<(Vec<usize>, Vec<f64>)> = x
        .par_chunks(ASSIGN_CHUNK * dim)
        .map(|chunk| {
            let rows = chunk.len() / dim;
            let mut dots = vec![0.0; rows * k];
            matmul(rows, dim, k, chunk, false, centroids, true, 0.0, &mut dots);
            let mut idx = Vec::with_capacity(rows);
            let mut dist = Vec::with_capacity(rows);
            for (r, row) in chunk.chunks(dim).enumerate() {
                let x_norm: f64 = row.iter().map(|v| v * v).sum();
                let (mut best, mut best_d) = (0, f64::INFINITY);
                for (j, &cn) in c_norms.iter().enumerate() {
                    let d = cn - 2.0 * dots[r * k + j];
                    if d < best_d {
                        best = j;
                        best_d = d;
                    }
                }
                idx.push(best);
                dist.push((best_d + x_norm).max(0.0));
            }
            (idx, dist)
        })
        .collect();
    let mut idx = Vec::with_capacity(x.len() / dim);
    let mut dist = Vec::with_capacity(x.len() / dim);
    for (i, d) in parts {
        idx.extend(i);
        dist.extend(d);
    }
    (idx, dist)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding.
fn kmeans_pp(x: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.len() / dim;
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Lloyd's K-means over `frames` (`n x dim`), seeded by k-means++. Empty
/// clusters are re-seeded with the frame farthest from its centroid.
pub fn vq_fit(frames: &[f64], dim: usize, cfg: &VqConfig) -> Result<VqCodebook> {
    if dim == 0 || frames.len() % dim != 0 {
        return Err(Error::Shape("frame buffer does not match the frame width".into()));
    }
    let n = frames.len() / dim;
    if cfg.k == 0 || n < cfg.k {
        return Err(Error::InvalidInput(format!("{n} frames cannot fit {} centroids", cfg.k)));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite frame values".into()));
    }
    let (mean, scale) = if cfg.standardize {
        let mut mean = vec![0.0; dim];
        for r in frames.chunks(dim) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in frames.chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.iter().map(|s| (s / n as f64).sqrt().max(1e-12)).collect();
        (mean, scale)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let x: Vec<f64> = frames
        .chunks(dim)
        .flat_map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s))
        .collect();
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_pp(&x, dim, k, &mut rng);
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (assign, dist) = nearest(&x, dim, &centroids, k);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                *s += v;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let mut donors = order.into_iter();
        let mut shift: f64 = 0.0;
        let mut next = vec![0.0; k * dim];
        for j in 0..k {
            let dst = &mut next[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                for (d, s) in dst.iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *d = s / counts[j] as f64;
                }
            } else {
                let donor = donors.next().expect("n >= k guarantees a donor");
                dst.copy_from_slice(&x[donor * dim..(donor + 1) * dim]);
                shift = f64::INFINITY;
            }
            shift = shift.max(sq_dist(dst, &centroids[j * dim..(j + 1) * dim]).sqrt());
        }
        centroids = next;
        if shift < cfg.tolerance {
            break;
        }
    }
    Ok(VqCodebook {
        k,
        dim,
        centroids,
        mean,
        scale,
        training_frames: n,
        iterations,
        seed: cfg.seed,
    })
}

fn histogram_of(assign: &[usize], k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for &a in assign {
        h[a] += 1.0;
    }
    let total = assign.len() as f64;
    h.iter_mut().for_each(|v| *v /= total);
    h
}

/// Normalized histogram of nearest-centroid assignments.
pub fn vq_histogram(series: &MfccFrameSeries, codebook: &VqCodebook) -> Result<Vec<f64>> {
    if series.frames() == 0 {
        return Err(Error::InvalidInput("no frames to quantize".into()));
    }
    if series.width() != codebook.dim {
        return Err(Error::Shape(format!("frames are {} wide, codebook {}", series.width(), codebook.dim)));
    }
    Ok(histogram_of(&codebook.assign(series.values())?, codebook.k))
}

/// Draws up to `cfg.sample_frames` frames uniformly without replacement from
/// all tracks (ids visited in sorted order for determinism).
pub fn sample_frames(mfcc: &HashMap<String, MfccFrameSeries>, cfg: &VqConfig) -> Result<(Vec<f64>, usize)> {
    let mut ids: Vec<&String> = mfcc.keys().collect();
    ids.sort();
    let dim = ids
        .first()
        .map(|id| mfcc[*id].width())
        .ok_or_else(|| Error::InvalidInput("no MFCC series to sample".into()))?;
    let index: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .flat_map(|(t, id)| (0..mfcc[*id].frames()).map(move |f| (t, f)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a3b_1e00);
    let take = cfg.sample_frames.min(index.len());
    let chosen = rand::seq::index::sample(&mut rng, index.len(), take);
    let mut picks: Vec<usize> = chosen.into_iter().collect();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(take * dim);
    for p in picks {
        let (t, f) = index[p];
        out.extend_from_slice(mfcc[ids[t]].row(f));
    }
    Ok((out, dim))
}

/// Histogram vectors for whole tracks and for patch-sized excerpts.
pub struct VqSource<'a> {
    codebook: &'a VqCodebook,
    mfcc: &'a HashMap<String, MfccFrameSeries>,
    patch_frames: usize,
    songs: HashMap<String, Vec<f64>>,
}

impl<'a> VqSource<'a> {
    pub fn new(codebook: &'a VqCodebook, mfcc: &'a HashMap<String, MfccFrameSeries>, patch_frames: usize) -> Result<Self> {
        let songs = mfcc
            .iter()
            .map(|(id, s)| Ok((id.clone(), vq_histogram(s, codebook)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            codebook,
            mfcc,
            patch_frames,
            songs,
        })
    }

    pub fn song(&self, id: &str) -> Result<&[f64]> {
        self.songs
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::NotFound(format!("no MFCC frames for track '{id}'")))
    }
}

impl EmbeddingSource for VqSource<'_> {
    fn songs(&self, tracks: &[&str]) -> Result<Vec<Vec<f64>>> {
        tracks.iter().map(|t| Ok(self.song(t)?.to_vec())).collect()
    }

    fn excerpts(&self, refs: &[&SampleRef]) -> Result<Vec<Vec<f64>>> {
        refs.iter()
            .map(|r| {
                let s = self
                    .mfcc
                    .get(&r.track)
                    .ok_or_else(|| Error::NotFound(format!("no MFCC frames for track '{}'", r.track)))?;
                let end = (r.start + self.patch_frames).min(s.frames());
                if r.start >= end {
                    return Err(Error::InvalidInput(format!("excerpt start {} beyond track '{}'", r.start, r.track)));
                }
                let rows = &s.values()[r.start * s.width()..end * s.width()];
                Ok(histogram_of(&self.codebook.assign(rows)?, self.codebook.k))
            })
            .collect()
    }
}
