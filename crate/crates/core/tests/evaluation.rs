mod support;

use std::collections::HashMap;

use musim_core::audio::Waveform;
use musim_core::corpus::{SampleRef, Triplet, TripletSampler};
use musim_core::evaluation::{
    evaluate, filter_user_triplets, pool_embeddings, song_embedding, song_level_accuracy, triplet_accuracy, Annotation,
    EmbeddingSource, Space, TripletSets, UserAnnotationSet, UserTriplet,
};
use musim_core::features::{compute_log_mel, extract_patch, FeatureConfig};
use musim_core::model::{init_params, ArchConfig, DimensionMask, Embedder, EmbeddingVector, MaskSet};
use musim_core::{Condition, Dimension, Error};
use rand::Rng;

/// Fixed vectors per track; excerpts reuse their track's vector.
struct Table(HashMap<String, Vec<f64>>);

impl EmbeddingSource for Table {
    fn songs(&self, tracks: &[&str]) -> musim_core::Result<Vec<Vec<f64>>> {
        Ok(tracks.iter().map(|t| self.0[*t].clone()).collect())
    }
    fn excerpts(&self, refs: &[&SampleRef]) -> musim_core::Result<Vec<Vec<f64>>> {
        Ok(refs.iter().map(|r| self.0[&r.track].clone()).collect())
    }
}

fn fixture_sets(fc: &support::FixtureCorpus, per: usize, seed: u64) -> TripletSets {
    let sampler = TripletSampler::new(fc.corpus.tracks(), |id| fc.frames.get(id).copied(), 129);
    let mut r = support::rng(seed);
    let mut sets = TripletSets::default();
    for c in Condition::ALL {
        sets.sets.insert(c, sampler.sample_many(c, per, &mut r).unwrap());
    }
    sets
}

#[test]
fn three_window_pooling_matches_hand_arithmetic() {
    let w = [
        EmbeddingVector::new(vec![1.0, 0.0, 0.0]),
        EmbeddingVector::new(vec![0.0, 1.0, 0.0]),
        EmbeddingVector::new(vec![0.6, 0.8, 0.0]),
    ];
    // mean = (1.6, 1.8, 0) / 3, norm of (1.6, 1.8) = sqrt(5.8)
    let p = pool_embeddings(&w).unwrap();
    let n = 5.8f64.sqrt();
    for (got, want) in p.values.iter().zip([1.6 / n, 1.8 / n, 0.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn song_embedding_of_a_single_window_is_the_patch_embedding() {
    let cfg = FeatureConfig::default();
    let arch = ArchConfig::preset("tiny").unwrap();
    let emb = Embedder::new(&init_params(&arch, 3).unwrap()).unwrap();
    let mut r = support::rng(1);
    let n = cfg.samples_for_frames(129) + 100;
    let samples: Vec<f32> = (0..n).map(|_| r.random_range(-0.3..0.3)).collect();
    let w = Waveform::new(samples, cfg.sample_rate).unwrap();
    let song = song_embedding(&w, &cfg, &emb).unwrap();
    let patch = extract_patch(&compute_log_mel(&w, &cfg).unwrap(), 0, &cfg).unwrap().standardize(&cfg).unwrap();
    let single = emb.embed(&patch).unwrap();
    for (a, b) in song.values.iter().zip(&single.values) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!((song.norm() - 1.0).abs() < 1e-9);

    let short = Waveform::new(vec![0.1; cfg.samples_for_frames(128)], cfg.sample_rate).unwrap();
    assert!(matches!(song_embedding(&short, &cfg, &emb), Err(Error::InsufficientAudio(_))));
}

#[test]
fn seven_triplet_fixture_scores_four_sevenths() {
    let d = [(0.1, 0.2), (0.5, 0.4), (0.2, 0.2), (0.0, 0.3), (0.9, 1.0), (1.0, 0.1), (0.3, 0.7)];
    let brute = d.iter().filter(|(p, n)| p < n).count();
    assert_eq!(brute, 4);
    let acc = triplet_accuracy(&d, |&(p, n)| Ok((p, n))).unwrap();
    assert!((acc - 4.0 / 7.0).abs() < 1e-15);
}

#[test]
fn tag_indicator_embedding_is_perfect_on_tag_dimensions() {
    let fc = support::fixture_corpus(60, 4);
    let vocab = musim_core::corpus::Vocabulary::builtin();
    let masks = MaskSet::new(256).unwrap();
    let mut table = HashMap::new();
    for t in fc.corpus.tracks() {
        let mut v = vec![0.0; 256];
        for d in [Dimension::Genre, Dimension::Mood, Dimension::Instruments] {
            let names = vocab.tags(d).unwrap();
            for tag in t.tags(d).unwrap() {
                let i = names.iter().position(|n| n == tag).unwrap();
                v[64 * d.index() + i] = 1.0;
            }
        }
        table.insert(t.track_id.clone(), v);
    }
    let src = Table(table);
    let sets = fixture_sets(&fc, 200, 5);
    let r = evaluate(&src, &sets, None, Space::Sub, Some(&masks)).unwrap();
    assert_eq!((r.genre, r.mood, r.instruments), (1.0, 1.0, 1.0));
}

#[test]
fn sub_space_with_all_ones_masks_equals_full_space() {
    let fc = support::fixture_corpus(40, 6);
    let mut r = support::rng(7);
    let src = Table(
        fc.corpus
            .tracks()
            .iter()
            .map(|t| (t.track_id.clone(), support::random_unit(32, &mut r)))
            .collect(),
    );
    let ones = DimensionMask { dimension: None, bits: vec![true; 32] };
    let masks = MaskSet {
        semantic: Dimension::ALL.map(|d| DimensionMask { dimension: Some(d), bits: ones.bits.clone() }),
        all: ones,
    };
    let sets = fixture_sets(&fc, 100, 8);
    let sub = evaluate(&src, &sets, None, Space::Sub, Some(&masks)).unwrap();
    let all = evaluate(&src, &sets, None, Space::All, None).unwrap();
    assert_eq!(
        (sub.genre, sub.mood, sub.instruments, sub.tempo, sub.track),
        (all.genre, all.mood, all.instruments, all.tempo, all.track)
    );
}

#[test]
fn coordinates_outside_the_mask_do_not_matter() {
    let fc = support::fixture_corpus(40, 9);
    let masks = MaskSet::new(32).unwrap();
    let mut r = support::rng(10);
    let base: HashMap<String, Vec<f64>> = fc
        .corpus
        .tracks()
        .iter()
        .map(|t| (t.track_id.clone(), support::random_unit(32, &mut r)))
        .collect();
    let mut shaken = base.clone();
    for v in shaken.values_mut() {
        for x in &mut v[8..] {
            *x += r.random_range(-1.0..1.0);
        }
    }
    let sets = fixture_sets(&fc, 200, 11);
    let genre = sets.get(Condition::Genre).unwrap();
    let a = song_level_accuracy(&Table(base), genre, Space::Sub, Some(&masks)).unwrap();
    let b = song_level_accuracy(&Table(shaken), genre, Space::Sub, Some(&masks)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn random_vectors_score_near_chance() {
    let fc = support::fixture_corpus(80, 12);
    let mut r = support::rng(13);
    let src = Table(
        fc.corpus
            .tracks()
            .iter()
            .map(|t| (t.track_id.clone(), support::random_unit(32, &mut r)))
            .collect(),
    );
    let sets = fixture_sets(&fc, 2000, 14);
    let rep = evaluate(&src, &sets, None, Space::All, None).unwrap();
    // Song-level scores share 80 vectors, so allow generous slack around 0.5.
    for d in Dimension::ALL {
        assert!((rep.dimension(d) - 0.5).abs() < 0.12, "{d}: {}", rep.dimension(d));
    }
}

#[test]
fn missing_dimension_set_is_an_error() {
    let fc = support::fixture_corpus(20, 1);
    let mut sets = fixture_sets(&fc, 10, 2);
    sets.sets.remove(&Condition::Mood);
    let src = Table(fc.corpus.tracks().iter().map(|t| (t.track_id.clone(), vec![1.0; 4])).collect());
    assert!(matches!(evaluate(&src, &sets, None, Space::All, None), Err(Error::NotFound(_))));
}

#[test]
fn triplet_sets_round_trip_through_files() {
    let fc = support::fixture_corpus(20, 3);
    let sets = fixture_sets(&fc, 25, 4);
    let dir = tempfile::tempdir().unwrap();
    sets.write_dir(dir.path()).unwrap();
    assert!(dir.path().join("genre.jsonl").exists());
    assert_eq!(TripletSets::read_dir(dir.path()).unwrap(), sets);
    assert!(TripletSets::read_dir(&dir.path().join("nothing")).is_err());
}

#[test]
fn user_triplets_keep_high_agreement_and_reorient() {
    let ann = |id: &str, p, n| Annotation { triplet_id: id.into(), votes_p: p, votes_n: n };
    let set = UserAnnotationSet::new(vec![
        ann("a", 9, 1),  // 0.9, kept
        ann("b", 1, 19), // 0.95, kept and swapped
        ann("c", 8, 2),  // 0.8, dropped
    ])
    .unwrap();
    assert!(UserAnnotationSet::new(vec![ann("d", 0, 0)]).is_err());
    let kept = filter_user_triplets(&set, 0.9);
    let ids: Vec<(&str, bool)> = kept.iter().map(|k| (k.triplet_id.as_str(), k.swapped)).collect();
    assert_eq!(ids, vec![("a", false), ("b", true)]);
    let ut = |id: &str| UserTriplet {
        triplet_id: id.into(),
        anchor: "x".into(),
        positive: "p".into(),
        negative: "n".into(),
    };
    let sel = UserTriplet::select(&[ut("a"), ut("b"), ut("c")], &kept);
    assert_eq!(sel.len(), 2);
    assert_eq!((sel[1].positive.as_str(), sel[1].negative.as_str()), ("n", "p"));
    let t: Triplet = sel[0].to_triplet();
    assert_eq!(t.anchor.track, "x");
}
