//! Triplet loss, masked conditional distances and the track-regularized
//! objective, with analytic gradients w.r.t. the embeddings.

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureStore, Triplet};
use crate::dimension::Condition;
use crate::error::{Error, Result};
use crate::model::{DimensionMask, Embedder, MaskSet, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 0.1, lambda: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("embedding lengths differ: {a} vs {b}")));
    }
    Ok(())
}

/// Euclidean distance.
pub fn distance(e1: &[f64], e2: &[f64]) -> Result<f64> {
    same_len(e1.len(), e2.len())?;
    Ok(e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Euclidean distance between the mask-gated vectors.
pub fn masked_distance(e1: &[f64], e2: &[f64], mask: &DimensionMask) -> Result<f64> {
    same_len(e1.len(), e2.len())?;
    same_len(e1.len(), mask.len())?;
    Ok(e1
        .iter()
        .zip(e2)
        .zip(&mask.bits)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Row indices of one triplet inside an embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletRows {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub condition: Condition,
}

fn masked_diff<F: Scalar>(x: &[F], y: &[F], mask: &[bool]) -> (Vec<F>, F) {
    let diff: Vec<F> = x
        .iter()
        .zip(y)
        .zip(mask)
        .map(|((&a, &b), &m)| if m { a - b } else { F::zero() })
        .collect();
    let d = diff.iter().map(|&v| v * v).sum::<F>().sqrt();
    (diff, d)
}

/// Hinge loss of one triplet and its gradient, accumulated into `grad` scaled by
/// `weight`. Coordinates outside `mask` receive exactly zero gradient; at the
/// hinge kink (argument exactly 0) the inactive branch is used.
fn triplet_term<F: Scalar>(
    emb: &[F],
    dim: usize,
    t: &TripletRows,
    mask: &[bool],
    margin: F,
    weight: F,
    grad: &mut [F],
) -> F {
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let (dap_vec, d_ap) = masked_diff(row(t.anchor), row(t.positive), mask);
    let (dan_vec, d_an) = masked_diff(row(t.anchor), row(t.negative), mask);
    let arg = d_ap - d_an + margin;
    if arg <= F::zero() {
        return F::zero();
    }
    let ga = if d_ap > F::zero() { weight / d_ap } else { F::zero() };
    let gn = if d_an > F::zero() { weight / d_an } else { F::zero() };
    for j in 0..dim {
        let up = dap_vec[j] * ga;
        let un = dan_vec[j] * gn;
        grad[t.anchor * dim + j] += up - un;
        grad[t.positive * dim + j] -= up;
        grad[t.negative * dim + j] += un;
    }
    arg
}

/// Mean conditional loss over `category` plus `lambda` times the mean unmasked
/// loss over `track`, evaluated on the row-major `emb` matrix. Returns the loss
/// and its gradient w.r.t. every embedding coordinate.
pub fn combined_loss_and_grad<F: Scalar>(
    emb: &[F],
    dim: usize,
    category: &[TripletRows],
    track: &[TripletRows],
    masks: &MaskSet,
    cfg: &LossConfig,
) -> Result<(F, Vec<F>)> {
    if category.is_empty() && track.is_empty() {
        return Err(Error::InvalidInput("both triplet batches are empty".into()));
    }
    if masks.dim() != dim {
        return Err(Error::Shape(format!("masks cover {} dims, embeddings have {dim}", masks.dim())));
    }
    let margin = F::from_f64_lossy(cfg.margin);
    let mut grad = vec![F::zero(); emb.len()];
    let mut total = F::zero();
    if !category.is_empty() {
        let w = F::one() / F::from_usize(category.len()).unwrap();
        let mut sum = F::zero();
        for t in category {
            if t.condition == Condition::Track {
                return Err(Error::InvalidInput("track triplet in the category batch".into()));
            }
            let mask = &masks.for_condition(t.condition).bits;
            sum += triplet_term(emb, dim, t, mask, margin, w, &mut grad);
        }
        total += sum * w;
    }
    if !track.is_empty() && cfg.lambda > 0.0 {
        let lambda = F::from_f64_lossy(cfg.lambda);
        let w = lambda / F::from_usize(track.len()).unwrap();
        let mut sum = F::zero();
        for t in track {
            sum += triplet_term(emb, dim, t, &masks.all.bits, margin, w, &mut grad);
        }
        total += sum * w;
    }
    Ok((total, grad))
}

fn embed_triplets(
    triplets: &[&Triplet],
    store: &FeatureStore,
    embedder: &Embedder,
) -> Result<(Vec<f64>, Vec<TripletRows>)> {
    let mut patches = Vec::with_capacity(triplets.len() * 3);
    for t in triplets {
        for r in [&t.anchor, &t.positive, &t.negative] {
            patches.push(store.patch(r)?);
        }
    }
    let refs: Vec<_> = patches.iter().collect();
    let emb = embedder.embed_batch(&refs)?;
    let flat = emb.into_iter().flat_map(|e| e.values).collect();
    let rows = triplets
        .iter()
        .enumerate()
        .map(|(i, t)| TripletRows {
            anchor: 3 * i,
            positive: 3 * i + 1,
            negative: 3 * i + 2,
            condition: t.condition,
        })
        .collect();
    Ok((flat, rows))
}

/// Masked triplet loss of a single semantic triplet under the current model.
pub fn conditional_loss(t: &Triplet, store: &FeatureStore, embedder: &Embedder, cfg: &LossConfig) -> Result<f64> {
    let d = t
        .condition
        .dimension()
        .ok_or_else(|| Error::InvalidInput("conditional loss needs a semantic condition".into()))?;
    let (emb, _) = embed_triplets(&[t], store, embedder)?;
    let dim = embedder.arch().embedding_dim;
    let mask = embedder.masks().for_dimension(d);
    let (a, p, n) = (&emb[..dim], &emb[dim..2 * dim], &emb[2 * dim..]);
    Ok(triplet_loss(
        masked_distance(a, p, mask)?,
        masked_distance(a, n, mask)?,
        cfg.margin,
    ))
}

/// Track-regularized objective over two triplet batches under the current model.
pub fn combined_loss(
    category: &[Triplet],
    track: &[Triplet],
    store: &FeatureStore,
    embedder: &Embedder,
    cfg: &LossConfig,
) -> Result<f64> {
    let all: Vec<&Triplet> = category.iter().chain(track).collect();
    let (emb, rows) = embed_triplets(&all, store, embedder)?;
    let (cat_rows, track_rows) = rows.split_at(category.len());
    let dim = embedder.arch().embedding_dim;
    let (loss, _) = combined_loss_and_grad(&emb, dim, cat_rows, track_rows, embedder.masks(), cfg)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Dimension;
    use proptest::prelude::*;

    #[test]
    fn distance_basics() {
        let a = [0.6, 0.8];
        assert_eq!(distance(&a, &a).unwrap(), 0.0);
        assert!((distance(&a, &[-0.6, -0.8]).unwrap() - 2.0).abs() < 1e-12);
        assert!(distance(&a, &[1.0]).is_err());
    }

    #[test]
    fn masked_distance_special_masks() {
        let masks = MaskSet::new(8).unwrap();
        let a = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let b = [0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
        assert_eq!(masked_distance(&a, &b, &masks.all).unwrap(), distance(&a, &b).unwrap());
        let zero = DimensionMask {
            dimension: None,
            bits: vec![false; 8],
        };
        assert_eq!(masked_distance(&a, &b, &zero).unwrap(), 0.0);
    }

    #[test]
    fn hinge_values() {
        assert_eq!(triplet_loss(0.2, 0.5, 0.1), 0.0);
        assert!((triplet_loss(0.4, 0.4, 0.1) - 0.1).abs() < 1e-15);
        assert_eq!(LossConfig::default().margin, 0.1);
        assert_eq!(LossConfig::default().lambda, 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { margin: 0.0, lambda: 0.5 }.validate().is_err());
        assert!(LossConfig { margin: 0.1, lambda: -1.0 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn empty_batches_rejected() {
        let masks = MaskSet::new(4).unwrap();
        assert!(combined_loss_and_grad::<f64>(&[0.0; 4], 4, &[], &[], &masks, &LossConfig::default()).is_err());
    }

    #[test]
    fn gradient_is_local_to_the_condition_subspace() {
        let masks = MaskSet::new(8).unwrap();
        let emb: Vec<f64> = (0..24).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let t = TripletRows {
            anchor: 0,
            positive: 1,
            negative: 2,
            condition: Condition::Mood,
        };
        let cfg = LossConfig { margin: 5.0, lambda: 0.0 };
        let (loss, g) = combined_loss_and_grad(&emb, 8, &[t], &[], &masks, &cfg).unwrap();
        assert!(loss > 0.0);
        let range = masks.range(Dimension::Mood);
        for row in 0..3 {
            for j in 0..8 {
                if !range.contains(&j) {
                    assert_eq!(g[row * 8 + j], 0.0);
                }
            }
        }
        assert!(g.iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn hinge_bounds(d_ap in 0.0f64..4.0, d_an in 0.0f64..4.0, margin in 0.001f64..1.0) {
            let l = triplet_loss(d_ap, d_an, margin);
            prop_assert!(l >= 0.0);
            prop_assert!(l <= d_ap + margin + 1e-12);
        }

        #[test]
        fn hinge_positive_homogeneity(d_ap in 0.0f64..4.0, d_an in 0.0f64..4.0, margin in 0.001f64..1.0, c in 0.01f64..100.0) {
            let l = triplet_loss(d_ap, d_an, margin);
            let scaled = triplet_loss(c * d_ap, c * d_an, c * margin);
            prop_assert!((scaled - c * l).abs() <= 1e-9 * (1.0 + c * l));
        }
    }
}
