//! Track metadata, similarity rules, triplet sampling, splits and the
//! synthetic corpus generator.

mod metadata;
mod sampler;
mod split;
mod store;
pub mod synth;

pub use metadata::{load_metadata, similar, Corpus, Split, TrackMetadata, Vocabulary, TEMPO_TOLERANCE_BPM};
pub use sampler::{
    check_triplet, max_track_overlap, read_triplets, sample_category_triplet, sample_track_triplet, write_triplets,
    SampleRef, Triplet, TripletSampler, MAX_ATTEMPTS,
};
pub use split::{make_split, split_ids, SplitRatios};
pub use store::FeatureStore;
pub use synth::{generate_synthetic_corpus, SynthSpec, SyntheticCorpus, SyntheticTrack};
