//! Disentangled multidimensional music similarity.
//!
//! A convolutional encoder maps standardized log-mel patches to a unit-norm
//! embedding whose coordinates are split into four fixed, disjoint subspaces
//! (genre, mood, instruments, tempo). Training uses conditional triplet losses
//! on those subspaces plus a track-identity triplet term on the full space.
//! The crate also carries the evaluation harness, an MFCC vector-quantization
//! baseline and a weighted query-by-example index.

pub mod audio;
pub mod container;
pub mod corpus;
pub mod dimension;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod index;
pub mod fsutil;
pub mod losses;
pub mod model;
pub mod training;

pub use dimension::{Condition, Dimension};
pub use error::{Error, Result};
