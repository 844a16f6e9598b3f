//! Independent oracles shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use musim_core::corpus::{Corpus, FeatureStore, SampleRef, Split, TrackMetadata, Triplet, TripletSampler, Vocabulary};
use musim_core::features::{FeatureConfig, SpectrogramPatch};
use musim_core::index::{EmbeddingIndex, IndexEntry, Query, WeightProfile};
use musim_core::losses::{combined_loss, conditional_loss, masked_distance, triplet_loss, LossConfig, TripletRows};
use musim_core::model::{init_params, make_masks, ArchConfig, DimensionMask, Embedder, EmbeddingVector, Mode, ParamRole, Tensor, Weights};
use musim_core::training::{loss_and_grads, PlateauSchedule, ScheduleAction, TrainConfig};
use musim_core::{Condition, Dimension};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Squared distance over coordinates `lo..hi`, written out longhand.
fn sq_range(a: &[f64], b: &[f64], lo: usize, hi: usize) -> f64 {
    let mut s = 0.0;
    let mut i = lo;
    while i < hi {
        let d = a[i] - b[i];
        s += d * d;
        i += 1;
    }
    s
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Distance of a triplet's (anchor, positive, negative) under `cond`: the
/// condition's quarter of the vector, or all of it for track triplets.
fn oracle_triplet(a: &[f64], p: &[f64], n: &[f64], cond: Condition, margin: f64) -> f64 {
    let dim = a.len();
    let (lo, hi) = match cond {
        Condition::Genre => (0, dim / 4),
        Condition::Mood => (dim / 4, dim / 2),
        Condition::Instruments => (dim / 2, 3 * dim / 4),
        Condition::Tempo => (3 * dim / 4, dim),
        Condition::Track => (0, dim),
    };
    hinge(sq_range(a, p, lo, hi).sqrt() - sq_range(a, n, lo, hi).sqrt() + margin)
}

// ---------------------------------------------------------------- loss oracle

/// A small network and random feature store. The model only supplies
/// embeddings, so its size is irrelevant to what the oracle checks.
pub struct MicroWorld {
    pub store: FeatureStore,
    pub embedder: Embedder,
    pub tracks: Vec<(String, usize)>,
}

pub fn micro_world(seed: u64) -> MicroWorld {
    let cfg = FeatureConfig {
        mel_bands: 16,
        patch_frames: 9,
        ..FeatureConfig::default()
    };
    let arch = ArchConfig {
        preset: "micro".into(),
        input_frames: 9,
        input_bands: 16,
        stem_channels: 4,
        block_channels: vec![4],
        embedding_dim: 16,
    };
    let mut r = rng(seed);
    let mut store = FeatureStore::new(cfg);
    let mut tracks = Vec::new();
    for i in 0..6 {
        let frames = r.random_range(12..30);
        let values = (0..frames * 16).map(|_| r.random_range(0.0..1.5)).collect();
        let id = format!("t{i}");
        store
            .insert_series(&id, &SpectrogramPatch::from_values(frames, 16, values, false).unwrap())
            .unwrap();
        tracks.push((id, frames));
    }
    let embedder = Embedder::new(&init_params(&arch, seed).unwrap()).unwrap();
    MicroWorld { store, embedder, tracks }
}

impl MicroWorld {
    fn random_ref(&self, r: &mut ChaCha8Rng) -> SampleRef {
        let (id, frames) = self.tracks.choose(r).unwrap();
        SampleRef {
            track: id.clone(),
            start: r.random_range(0..=frames - 9),
        }
    }

    fn random_triplet(&self, cond: Condition, r: &mut ChaCha8Rng) -> Triplet {
        Triplet {
            anchor: self.random_ref(r),
            positive: self.random_ref(r),
            negative: self.random_ref(r),
            condition: cond,
        }
    }

    fn embedding(&self, s: &SampleRef) -> Vec<f64> {
        self.embedder.embed(&self.store.patch(s).unwrap()).unwrap().values
    }

    fn oracle(&self, t: &Triplet, margin: f64) -> f64 {
        oracle_triplet(
            &self.embedding(&t.anchor),
            &self.embedding(&t.positive),
            &self.embedding(&t.negative),
            t.condition,
            margin,
        )
    }
}

pub struct LossOracleReport {
    pub fixtures: usize,
    pub max_abs_err: f64,
    pub elapsed: Duration,
}

/// Each fixture exercises all four loss functions against longhand sums.
pub fn loss_oracle(fixtures: usize, seed: u64) -> LossOracleReport {
    let start = Instant::now();
    let world = micro_world(seed);
    let mut r = rng(seed ^ 0xf1);
    let semantic = [Condition::Genre, Condition::Mood, Condition::Instruments, Condition::Tempo];
    let mut worst: f64 = 0.0;
    for _ in 0..fixtures {
        let margin = r.random_range(0.01..0.6);
        let lambda = if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..2.0) };
        let cfg = LossConfig { margin, lambda };

        let (d_ap, d_an) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        worst = worst.max((triplet_loss(d_ap, d_an, margin) - hinge(d_ap - d_an + margin)).abs());

        let dim = 256;
        let a = random_unit(dim, &mut r);
        let b = random_unit(dim, &mut r);
        let bits: Vec<bool> = (0..dim).map(|_| r.random_bool(0.5)).collect();
        let kept: f64 = (0..dim).filter(|&i| bits[i]).map(|i| (a[i] - b[i]).powi(2)).sum();
        let mask = DimensionMask { dimension: None, bits };
        worst = worst.max((masked_distance(&a, &b, &mask).unwrap() - kept.sqrt()).abs());

        let t = world.random_triplet(*semantic.choose(&mut r).unwrap(), &mut r);
        let got = conditional_loss(&t, &world.store, &world.embedder, &cfg).unwrap();
        worst = worst.max((got - world.oracle(&t, margin)).abs());

        let n_cat = r.random_range(1..=4);
        let n_trk = r.random_range(0..=2);
        let cat: Vec<Triplet> = (0..n_cat)
            .map(|_| world.random_triplet(*semantic.choose(&mut r).unwrap(), &mut r))
            .collect();
        let trk: Vec<Triplet> = (0..n_trk).map(|_| world.random_triplet(Condition::Track, &mut r)).collect();
        let got = combined_loss(&cat, &trk, &world.store, &world.embedder, &cfg).unwrap();
        let mut want = cat.iter().map(|t| world.oracle(t, margin)).sum::<f64>() / n_cat as f64;
        if n_trk > 0 {
            want += lambda * trk.iter().map(|t| world.oracle(t, margin)).sum::<f64>() / n_trk as f64;
        }
        worst = worst.max((got - want).abs());
    }
    LossOracleReport {
        fixtures,
        max_abs_err: worst,
        elapsed: start.elapsed(),
    }
}

// ------------------------------------------------------------ gradient check

pub struct GradReport {
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub elapsed: Duration,
}

/// Analytic parameter gradients of the combined objective on the tiny preset
/// (in f64) against central differences, along one random direction per layer
/// group and along single coordinates. A probe is treated as sitting in a
/// ReLU or max-pool kink neighborhood, and skipped, when two step sizes
/// disagree; hinge terms within 1e-3 of their kink are kept out by construction.
pub fn gradient_check(per_group: usize, seed: u64) -> GradReport {
    let start = Instant::now();
    let arch = ArchConfig::preset("tiny").unwrap();
    let params = init_params(&arch, seed).unwrap();
    let net = params.network();
    let mut w: Weights<f64> = params.to_weights(&net).unwrap();
    let mut r = rng(seed ^ 0x9d);
    // Move batch-norm affine terms and the bias off their identity values.
    for (spec, t) in net.specs().iter().zip(&mut w.tensors) {
        if matches!(spec.role, ParamRole::BnGamma | ParamRole::BnBeta | ParamRole::LinearBias) {
            for v in t.iter_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
    }
    let conds = [Condition::Genre, Condition::Tempo];
    let n = 3 * (conds.len() + 1);
    let size = arch.input_frames * arch.input_bands;
    let data: Vec<f64> = (0..n * size).map(|_| StandardNormal.sample(&mut r)).collect();
    let x = Tensor::from_vec(n, 1, arch.input_frames, arch.input_bands, data);
    let rows = |i: usize, c: Condition| TripletRows {
        anchor: 3 * i,
        positive: 3 * i + 1,
        negative: 3 * i + 2,
        condition: c,
    };
    let category: Vec<TripletRows> = conds.iter().enumerate().map(|(i, &c)| rows(i, c)).collect();
    let track = vec![rows(conds.len(), Condition::Track)];
    let masks = musim_core::model::MaskSet::new(arch.embedding_dim).unwrap();

    // Margin chosen so every hinge is active and well away from its kink.
    let out = net.forward(&w, x.clone(), Mode::Train);
    let dim = arch.embedding_dim;
    let e = |i: usize| &out.embeddings[i * dim..(i + 1) * dim];
    let mut min_arg = f64::INFINITY;
    let cfg = LossConfig { margin: 0.3, lambda: 0.5 };
    for t in category.iter().chain(&track) {
        let (a, p, ng) = (e(t.anchor), e(t.positive), e(t.negative));
        let dim4 = |c: Condition| match c.dimension() {
            Some(d) => (d.index() * dim / 4, (d.index() + 1) * dim / 4),
            None => (0, dim),
        };
        let (lo, hi) = dim4(t.condition);
        let arg = sq_range(a, p, lo, hi).sqrt() - sq_range(a, ng, lo, hi).sqrt() + cfg.margin;
        min_arg = min_arg.min(arg.abs());
    }
    assert!(min_arg > 1e-3, "fixture sits on a hinge kink");

    let (_, grads, _) = loss_and_grads(&net, &w, x.clone(), &category, &track, &masks, &cfg).unwrap();
    let specs: Vec<_> = net.specs().to_vec();
    // Directions over parameter space, as (tensor, index, weight) triples.
    let mut probes: Vec<(String, Vec<(usize, usize, f64)>)> = Vec::new();
    for group in ["stem", "block0", "block1", "head"] {
        let tensors: Vec<usize> = (0..specs.len())
            .filter(|&i| specs[i].role.trainable() && specs[i].name.starts_with(group))
            .collect();
        // A random unit direction across the whole group.
        let mut dir = Vec::new();
        for &ti in &tensors {
            for j in 0..specs[ti].len() {
                dir.push((ti, j, StandardNormal.sample(&mut r)));
            }
        }
        let norm = dir.iter().map(|d| d.2 * d.2).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| d.2 /= norm);
        probes.push((format!("{group} direction"), dir));
        // Single coordinates: the group's largest gradient, then random ones
        // whose gradient is large enough for the difference quotient to resolve.
        let mut coords: Vec<(usize, usize)> = Vec::new();
        let all: Vec<(usize, usize)> = tensors.iter().flat_map(|&ti| (0..specs[ti].len()).map(move |j| (ti, j))).collect();
        let g = |&(ti, j): &(usize, usize)| grads.tensors[ti][j].abs();
        coords.push(*all.iter().max_by(|a, b| g(a).total_cmp(&g(b))).unwrap());
        let resolvable: Vec<&(usize, usize)> = all.iter().filter(|c| g(c) > 1e-5).collect();
        for _ in 1..per_group {
            if let Some(c) = resolvable.choose(&mut r) {
                coords.push(**c);
            }
        }
        for (ti, j) in coords {
            probes.push((format!("{}[{j}]", specs[ti].name), vec![(ti, j, 1.0)]));
        }
    }

    let loss_along = |w: &mut Weights<f64>, dir: &[(usize, usize, f64)], t: f64| -> f64 {
        for &(ti, j, v) in dir {
            w.tensors[ti][j] += t * v;
        }
        let l = loss_and_grads(&net, w, x.clone(), &category, &track, &masks, &cfg).unwrap().0;
        for &(ti, j, v) in dir {
            w.tensors[ti][j] -= t * v;
        }
        l
    };
    let slope = |w: &mut Weights<f64>, dir: &[(usize, usize, f64)], h: f64| {
        (loss_along(w, dir, h) - loss_along(w, dir, -h)) / (2.0 * h)
    };
    let mut report = GradReport {
        checked: 0,
        excluded: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        elapsed: Duration::ZERO,
    };
    for (name, dir) in probes {
        let analytic: f64 = dir.iter().map(|&(ti, j, v)| grads.tensors[ti][j] * v).sum();
        let f1 = slope(&mut w, &dir, 1e-6);
        let f2 = slope(&mut w, &dir, 5e-7);
        let scale = analytic.abs().max(f1.abs());
        if (f1 - f2).abs() > 1e-5 * scale {
            report.excluded += 1;
            continue;
        }
        let rel = (analytic - f1).abs() / scale;
        report.checked += 1;
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{name}: analytic {analytic:.6e} numeric {f1:.6e}");
        }
    }
    report.elapsed = start.elapsed();
    report
}

// -------------------------------------------------------------- mask algebra

pub struct MaskReport {
    pub ones: [usize; 4],
    pub disjoint: bool,
    pub union: usize,
    pub max_decomposition_err: f64,
}

pub fn mask_algebra(seed: u64) -> MaskReport {
    let masks = make_masks();
    let ones = Dimension::ALL.map(|d| masks.for_dimension(d).ones());
    let mut disjoint = true;
    let mut union = 0;
    for i in 0..256 {
        let owners = Dimension::ALL.iter().filter(|&&d| masks.for_dimension(d).bits[i]).count();
        disjoint &= owners <= 1;
        union += usize::from(owners > 0);
    }
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let a: Vec<f64> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
        let full = sq_range(&a, &b, 0, 256);
        let parts: f64 = Dimension::ALL
            .iter()
            .map(|&d| masked_distance(&a, &b, masks.for_dimension(d)).unwrap().powi(2))
            .sum();
        worst = worst.max((full - parts).abs());
    }
    MaskReport {
        ones,
        disjoint,
        union,
        max_decomposition_err: worst,
    }
}

// ---------------------------------------------------------- sampler contracts

pub struct FixtureCorpus {
    pub corpus: Corpus,
    pub frames: HashMap<String, usize>,
}

/// Random tags from the shipped vocabulary, tempi 60-180 BPM and lengths
/// between 100 and 600 frames (some too short for any patch, some too short
/// for a track triplet).
pub fn fixture_corpus(n: usize, seed: u64) -> FixtureCorpus {
    let vocab = Vocabulary::builtin();
    let mut r = rng(seed);
    let pick = |tags: &[String], r: &mut ChaCha8Rng| -> BTreeSet<String> {
        let k = r.random_range(1..=2);
        (0..k).map(|_| tags.choose(r).unwrap().clone()).collect()
    };
    let mut tracks = Vec::new();
    let mut frames = HashMap::new();
    for i in 0..n {
        let id = format!("trk{i:03}");
        let genre = pick(&vocab.genre[..6], &mut r);
        let mood = pick(&vocab.mood[..5], &mut r);
        let instruments = pick(&vocab.instruments, &mut r);
        tracks.push(TrackMetadata {
            track_id: id.clone(),
            audio_path: format!("{id}.wav"),
            genre,
            mood,
            instruments,
            tempo_bpm: (r.random_range(60.0..180.0f64) * 10.0).round() / 10.0,
            split: Split::Train,
        });
        frames.insert(id, r.random_range(100..600));
    }
    FixtureCorpus {
        corpus: Corpus::new(tracks, &vocab).unwrap(),
        frames,
    }
}

/// The sampling rules restated from scratch. Returns a description of the
/// first broken rule.
pub fn triplet_violation(t: &Triplet, fc: &FixtureCorpus, patch: usize) -> Option<String> {
    let meta = |r: &SampleRef| fc.corpus.get(&r.track);
    let refs = [&t.anchor, &t.positive, &t.negative];
    for s in refs {
        let Some(&len) = fc.frames.get(&s.track) else {
            return Some(format!("unknown track {}", s.track));
        };
        if s.start + patch > len {
            return Some(format!("patch past the end of {}", s.track));
        }
    }
    let (a, p, n) = (meta(&t.anchor)?, meta(&t.positive)?, meta(&t.negative)?);
    let shares = |x: &BTreeSet<String>, y: &BTreeSet<String>| x.intersection(y).next().is_some();
    let sim = |x: &TrackMetadata, y: &TrackMetadata| match t.condition {
        Condition::Genre => shares(&x.genre, &y.genre),
        Condition::Mood => shares(&x.mood, &y.mood),
        Condition::Instruments => shares(&x.instruments, &y.instruments),
        Condition::Tempo => (x.tempo_bpm - y.tempo_bpm).abs() <= 5.0,
        Condition::Track => x.track_id == y.track_id,
    };
    if t.condition == Condition::Track {
        if a.track_id != p.track_id {
            return Some("positive from another track".into());
        }
        let (s1, s2) = (t.anchor.start, t.positive.start);
        let overlap = (s1.min(s2) + patch).saturating_sub(s1.max(s2));
        if 2 * overlap > patch {
            return Some(format!("overlap {overlap} of {patch} frames"));
        }
    } else if !sim(a, p) {
        return Some("positive not similar".into());
    }
    if n.track_id == a.track_id {
        return Some("negative from the anchor track".into());
    }
    if t.condition != Condition::Track && sim(a, n) {
        return Some("negative similar".into());
    }
    None
}

pub struct SamplerReport {
    pub sampled: [usize; 5],
    pub violations: [usize; 5],
    pub first: Option<String>,
}

pub fn sampler_contracts(per_condition: usize, seed: u64) -> SamplerReport {
    let fc = fixture_corpus(80, seed);
    let sampler = TripletSampler::new(fc.corpus.tracks(), |id| fc.frames.get(id).copied(), 129);
    let mut r = rng(seed ^ 0x5a);
    let mut report = SamplerReport {
        sampled: [0; 5],
        violations: [0; 5],
        first: None,
    };
    for (ci, c) in Condition::ALL.into_iter().enumerate() {
        for t in sampler.sample_many(c, per_condition, &mut r).unwrap() {
            report.sampled[ci] += 1;
            if t.condition != c {
                report.violations[ci] += 1;
                report.first.get_or_insert(format!("{c}: wrong condition label"));
            } else if let Some(v) = triplet_violation(&t, &fc, 129) {
                report.violations[ci] += 1;
                report.first.get_or_insert(format!("{c}: {v}"));
            }
        }
    }
    report
}

// ---------------------------------------------------------------- LR schedule

pub struct Trace {
    pub name: &'static str,
    pub losses: Vec<f64>,
    /// Hand-derived action per epoch.
    pub expected: Vec<ScheduleAction>,
    /// Hand-derived learning rate after each epoch.
    pub expected_lr: Vec<f64>,
}

fn lr_after(actions: &[ScheduleAction]) -> Vec<f64> {
    let mut lr = 0.01;
    actions
        .iter()
        .map(|a| {
            if *a == ScheduleAction::Reduced {
                lr /= 5.0;
            }
            lr
        })
        .collect()
}

pub fn lr_traces() -> Vec<Trace> {
    use ScheduleAction::*;
    let mut out = Vec::new();

    let mk = |name, losses: Vec<f64>, expected: Vec<ScheduleAction>| {
        let expected_lr = lr_after(&expected);
        Trace {
            name,
            losses,
            expected,
            expected_lr,
        }
    };

    out.push(mk("flat five", vec![1.0; 5], vec![Improved, Continue, Continue, Continue, Reduced]));

    out.push(mk(
        "steady decrease",
        (0..20).map(|i| 1.0 / (i + 1) as f64).collect(),
        vec![Improved; 20],
    ));

    let mut exp = vec![Improved];
    for _ in 0..5 {
        exp.extend([Continue, Continue, Continue, Reduced]);
    }
    exp.extend([Continue, Continue, Continue, Stop]);
    out.push(mk("flat until stop", vec![1.0; 25], exp));

    out.push(mk(
        "improvement resets patience",
        vec![1.0, 2.0, 2.0, 2.0, 0.5, 2.0, 2.0, 2.0, 2.0],
        vec![Improved, Continue, Continue, Continue, Improved, Continue, Continue, Continue, Reduced],
    ));

    out.push(mk(
        "patience restarts after a reduction",
        vec![1.0, 1.1, 1.1, 1.1, 1.1, 0.9, 1.0, 1.0, 1.0, 1.0],
        vec![Improved, Continue, Continue, Continue, Reduced, Improved, Continue, Continue, Continue, Reduced],
    ));

    out.push(mk(
        "equal loss is no improvement",
        vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.4],
        vec![Improved, Continue, Continue, Continue, Reduced, Improved],
    ));
    out
}

/// Runs a trace through the schedule with default settings; returns a
/// description of the first mismatch.
pub fn run_trace(t: &Trace) -> Result<(), String> {
    let cfg = TrainConfig::default();
    let mut s = PlateauSchedule::new(&cfg);
    for (i, &l) in t.losses.iter().enumerate() {
        let a = s.observe(l);
        if a != t.expected[i] {
            return Err(format!("{}: epoch {} gave {a:?}, expected {:?}", t.name, i + 1, t.expected[i]));
        }
        if (s.lr() - t.expected_lr[i]).abs() > 1e-15 {
            return Err(format!("{}: epoch {} lr {} expected {}", t.name, i + 1, s.lr(), t.expected_lr[i]));
        }
        if a == ScheduleAction::Stop {
            break;
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ retrieval

pub fn random_index(n: usize, dim: usize, seed: u64) -> EmbeddingIndex {
    let mut r = rng(seed);
    let entries = (0..n)
        .map(|i| IndexEntry {
            track_id: format!("track{i:03}"),
            genre: BTreeSet::new(),
            mood: BTreeSet::new(),
            instruments: BTreeSet::new(),
            bpm: 100.0,
            audio_path: String::new(),
            embedding: EmbeddingVector::new(random_unit(dim, &mut r)),
        })
        .collect();
    EmbeddingIndex::new(entries, "fp".into(), "cfg".into(), FeatureConfig::default(), 0).unwrap()
}

/// `sqrt(sum_d w_d * |e1_d - e2_d|^2)` with subspaces as contiguous quarters.
pub fn oracle_weighted(a: &[f64], b: &[f64], w: [f64; 4]) -> f64 {
    let q = a.len() / 4;
    (0..4).map(|d| w[d] * sq_range(a, b, d * q, (d + 1) * q)).sum::<f64>().sqrt()
}

pub struct RetrievalReport {
    pub profiles: usize,
    pub mismatches: usize,
    pub scaling_mismatches: usize,
}

pub fn retrieval_oracle(profiles: usize, seed: u64) -> RetrievalReport {
    let index = random_index(50, 256, seed);
    let mut r = rng(seed ^ 0x77);
    let mut report = RetrievalReport {
        profiles,
        mismatches: 0,
        scaling_mismatches: 0,
    };
    let ids: Vec<String> = index.entries().iter().map(|e| e.track_id.clone()).collect();
    for _ in 0..profiles {
        let mut w = [0.0; 4];
        while w.iter().all(|&x| x == 0.0) {
            w = [0; 4].map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..3.0) });
        }
        let profile = WeightProfile::new(w[0], w[1], w[2], w[3]).unwrap();
        let q = ids.choose(&mut r).unwrap().clone();
        let qe = &index.get(&q).unwrap().embedding.values;
        let mut oracle: Vec<(f64, &String)> = index
            .entries()
            .iter()
            .filter(|e| e.track_id != q)
            .map(|e| (oracle_weighted(qe, &e.embedding.values, w), &e.track_id))
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        let got = index.query(&Query::Track(q.clone()), &profile, 49, true).unwrap();
        let same = got.len() == oracle.len()
            && got
                .iter()
                .zip(&oracle)
                .all(|(h, (d, id))| &h.track_id == *id && (h.distance - d).abs() < 1e-12);
        report.mismatches += usize::from(!same);

        let c = r.random_range(0.01..100.0);
        let scaled = WeightProfile::new(c * w[0], c * w[1], c * w[2], c * w[3]).unwrap();
        let got2 = index.query(&Query::Track(q), &scaled, 49, true).unwrap();
        let order = |h: &[musim_core::index::Hit]| h.iter().map(|x| x.track_id.clone()).collect::<Vec<_>>();
        report.scaling_mismatches += usize::from(order(&got) != order(&got2));
    }
    report
}
