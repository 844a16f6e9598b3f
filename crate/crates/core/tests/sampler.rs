mod support;

use musim_core::corpus::{check_triplet, SampleRef, Triplet, TripletSampler};
use musim_core::Condition;
use std::collections::HashMap;

#[test]
fn ten_thousand_triplets_per_condition_follow_the_rules() {
    let r = support::sampler_contracts(10_000, 21);
    assert_eq!(r.sampled, [10_000; 5]);
    assert_eq!(r.violations, [0; 5], "{:?}", r.first);
}

#[test]
fn library_checker_agrees_with_oracle() {
    let fc = support::fixture_corpus(40, 5);
    let sampler = TripletSampler::new(fc.corpus.tracks(), |id| fc.frames.get(id).copied(), 129);
    let mut r = support::rng(1);
    for c in Condition::ALL {
        for t in sampler.sample_many(c, 500, &mut r).unwrap() {
            assert!(check_triplet(&t, &fc.corpus, 129).is_ok());
            assert!(support::triplet_violation(&t, &fc, 129).is_none());
        }
    }
}

#[test]
fn only_offsets_at_least_65_apart_on_a_minimal_track() {
    // One 194-frame track (129 + 65) and one other track for negatives.
    let fc = support::fixture_corpus(2, 3);
    let ids: Vec<String> = fc.corpus.tracks().iter().map(|t| t.track_id.clone()).collect();
    let frames: HashMap<String, usize> = [(ids[0].clone(), 194), (ids[1].clone(), 129)].into();
    let sampler = TripletSampler::new(fc.corpus.tracks(), |id| frames.get(id).copied(), 129);
    let valid: Vec<(usize, usize)> = (0..=65usize)
        .flat_map(|a| (0..=65usize).map(move |p| (a, p)))
        .filter(|(a, p)| a.abs_diff(*p) >= 65)
        .collect();
    assert_eq!(valid, vec![(0, 65), (65, 0)]);
    let mut r = support::rng(2);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..2000 {
        let t = sampler.sample_track(&mut r).unwrap();
        assert_eq!(t.anchor.track, ids[0]);
        assert!(valid.contains(&(t.anchor.start, t.positive.start)));
        seen.insert((t.anchor.start, t.positive.start));
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn anchors_are_uniform_over_eligible_tracks() {
    // Balanced fixture: four tracks, each sharing a genre with exactly one other
    // and long enough for track triplets, so every track is an eligible anchor.
    let mut fc = support::fixture_corpus(4, 9);
    let vocab = musim_core::corpus::Vocabulary::builtin();
    let mut tracks = fc.corpus.tracks().to_vec();
    for (i, t) in tracks.iter_mut().enumerate() {
        t.genre = [vocab.genre[i / 2].clone()].into();
    }
    fc.corpus = musim_core::corpus::Corpus::new(tracks, &vocab).unwrap();
    let sampler = TripletSampler::new(fc.corpus.tracks(), |_| Some(400), 129);
    let mut r = support::rng(3);
    let n = 10_000;
    for c in [Condition::Track, Condition::Genre] {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..n {
            *counts.entry(sampler.sample(c, &mut r).unwrap().anchor.track).or_default() += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert_eq!(counts.len(), 4);
        for (id, k) in counts {
            assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{c} {id}: {k}");
        }
    }
}

#[test]
fn short_tracks_never_appear() {
    let fc = support::fixture_corpus(30, 12);
    let sampler = TripletSampler::new(fc.corpus.tracks(), |id| fc.frames.get(id).copied(), 129);
    let short: Vec<&String> = fc.frames.iter().filter(|(_, &f)| f < 129).map(|(id, _)| id).collect();
    assert!(!short.is_empty());
    let mut r = support::rng(4);
    for c in Condition::ALL {
        for t in sampler.sample_many(c, 300, &mut r).unwrap() {
            for s in [&t.anchor, &t.positive, &t.negative] {
                assert!(!short.contains(&&s.track));
            }
        }
    }
}

#[test]
fn checker_rejects_broken_triplets() {
    let fc = support::fixture_corpus(10, 1);
    let id = fc.corpus.tracks()[0].track_id.clone();
    let other = fc.corpus.tracks()[1].track_id.clone();
    let at = |track: &String, start| SampleRef { track: track.clone(), start };
    let overlapping = Triplet {
        anchor: at(&id, 0),
        positive: at(&id, 10),
        negative: at(&other, 0),
        condition: Condition::Track,
    };
    assert!(check_triplet(&overlapping, &fc.corpus, 129).is_err());
    assert!(support::triplet_violation(&overlapping, &fc, 129).is_some());
}
