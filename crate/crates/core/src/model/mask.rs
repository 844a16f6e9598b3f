use serde::{Deserialize, Serialize};

use crate::dimension::{Condition, Dimension};
use crate::error::{Error, Result};

/// Binary mask over embedding coordinates. `dimension == None` is the all-ones
/// mask used for track triplets and unmasked distances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionMask {
    pub dimension: Option<Dimension>,
    pub bits: Vec<bool>,
}

impl DimensionMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Hadamard product with `values`.
    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.bits.len() {
            return Err(Error::Shape(format!(
                "mask of length {} applied to vector of length {}",
                self.bits.len(),
                values.len()
            )));
        }
        Ok(values
            .iter()
            .zip(&self.bits)
            .map(|(&v, &b)| if b { v } else { 0.0 })
            .collect())
    }
}

/// The four fixed disjoint semantic masks plus the all-ones mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub semantic: [DimensionMask; 4],
    pub all: DimensionMask,
}

impl MaskSet {
    /// Splits `embedding_dim` into four contiguous equal blocks in the order
    /// genre, mood, instruments, tempo.
    pub fn new(embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 || embedding_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {embedding_dim} cannot be split into four equal subspaces"
            )));
        }
        let sub = embedding_dim / 4;
        let semantic = Dimension::ALL.map(|d| {
            let range = d.index() * sub..(d.index() + 1) * sub;
            DimensionMask {
                dimension: Some(d),
                bits: (0..embedding_dim).map(|i| range.contains(&i)).collect(),
            }
        });
        Ok(Self {
            semantic,
            all: DimensionMask {
                dimension: None,
                bits: vec![true; embedding_dim],
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.all.len()
    }

    pub fn for_dimension(&self, d: Dimension) -> &DimensionMask {
        &self.semantic[d.index()]
    }

    pub fn for_condition(&self, c: Condition) -> &DimensionMask {
        match c.dimension() {
            Some(d) => self.for_dimension(d),
            None => &self.all,
        }
    }

    /// Coordinate range owned by `d`.
    pub fn range(&self, d: Dimension) -> std::ops::Range<usize> {
        let sub = self.dim() / 4;
        d.index() * sub..(d.index() + 1) * sub
    }
}

/// The semantic masks and the all-ones mask for the default 256-d embedding.
pub fn make_masks() -> MaskSet {
    MaskSet::new(256).expect("256 splits evenly")
}
