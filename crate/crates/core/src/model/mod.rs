//! Embedding network, fixed dimension masks and checkpoint I/O.

pub mod layers;
mod mask;
pub mod network;
pub mod nn;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, NamedArray};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, SpectrogramPatch};

pub use layers::{Mode, ParamRole, Weights};
pub use mask::{make_masks, DimensionMask, MaskSet};
pub use network::Network;
pub use nn::{Scalar, Tensor};

/// Architecture contract. `full` is the 256-d, six-block encoder; `tiny` is the
/// two-block desk-scale variant with four 8-d subspaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub preset: String,
    pub input_frames: usize,
    pub input_bands: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub embedding_dim: usize,
}

impl ArchConfig {
    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            input_frames: 129,
            input_bands: 128,
            stem_channels: 64,
            block_channels: vec![64, 96, 128, 160, 192, 256],
            embedding_dim: 256,
        }
    }

    pub fn tiny() -> Self {
        Self {
            preset: "tiny".into(),
            input_frames: 129,
            input_bands: 128,
            stem_channels: 32,
            block_channels: vec![32, 32],
            embedding_dim: 32,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown architecture preset '{other}' (full|tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.embedding_dim % 4 != 0 {
            return Err(Error::Config("embedding_dim must be a positive multiple of 4".into()));
        }
        if self.block_channels.iter().any(|&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config("block widths must be positive multiples of 4".into()));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem_channels must be positive".into()));
        }
        let mut h = self.input_frames / 2;
        let mut w = self.input_bands / 2;
        for _ in &self.block_channels {
            if h == 0 || w == 0 {
                break;
            }
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        if h == 0 || w == 0 {
            return Err(Error::Config("input too small for the number of blocks".into()));
        }
        Ok(())
    }

    pub fn subspace_dim(&self) -> usize {
        self.embedding_dim / 4
    }
}

/// All learnable weights and batch-norm statistics, keyed by layer name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub seed: u64,
    pub tensors: BTreeMap<String, NamedArray>,
}

impl ModelParams {
    pub fn network(&self) -> Network {
        Network::new(&self.arch)
    }

    pub fn to_weights<F: Scalar>(&self, net: &Network) -> Result<Weights<F>> {
        let tensors = net
            .specs()
            .iter()
            .map(|s| {
                let t = self
                    .tensors
                    .get(&s.name)
                    .ok_or_else(|| Error::Validation(format!("missing parameter '{}'", s.name)))?;
                if t.shape != s.shape {
                    return Err(Error::Validation(format!(
                        "parameter '{}' has shape {:?}, expected {:?}",
                        s.name, t.shape, s.shape
                    )));
                }
                Ok(t.data.iter().map(|&v| F::from_f64_lossy(v as f64)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Weights { tensors })
    }

    pub fn from_weights<F: Scalar>(net: &Network, weights: &Weights<F>, seed: u64) -> Self {
        let tensors = net
            .specs()
            .iter()
            .zip(&weights.tensors)
            .map(|(s, w)| {
                (
                    s.name.clone(),
                    NamedArray {
                        name: s.name.clone(),
                        shape: s.shape.clone(),
                        data: w.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                    },
                )
            })
            .collect();
        Self {
            arch: net.arch().clone(),
            seed,
            tensors,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic initialization: He-normal convolutions, unit-variance-preserving
/// projection, identity batch norm.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let net = Network::new(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = net
        .specs()
        .iter()
        .map(|s| {
            let data: Vec<f32> = match s.role {
                ParamRole::ConvWeight | ParamRole::LinearWeight => {
                    let gain = if s.role == ParamRole::ConvWeight { 2.0 } else { 1.0 };
                    let normal = Normal::new(0.0, (gain / s.fan_in as f64).sqrt()).expect("positive std");
                    (0..s.len()).map(|_| normal.sample(&mut rng) as f32).collect()
                }
                ParamRole::BnGamma | ParamRole::BnRunningVar => vec![1.0; s.len()],
                ParamRole::BnBeta | ParamRole::BnRunningMean | ParamRole::LinearBias => vec![0.0; s.len()],
            };
            (
                s.name.clone(),
                NamedArray {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data,
                },
            )
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        seed,
        tensors,
    })
}

/// A point in the embedding space.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy rescaled to unit L2 norm (zero vectors stay zero).
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n <= 1e-12 {
            return self.clone();
        }
        Self::new(self.values.iter().map(|v| v / n).collect())
    }

    pub fn masked(&self, mask: &DimensionMask) -> Result<Self> {
        Ok(Self::new(mask.apply(&self.values)?))
    }
}

pub(crate) fn check_patch(p: &SpectrogramPatch, arch: &ArchConfig) -> Result<()> {
    if p.frames() != arch.input_frames || p.bands() != arch.input_bands {
        return Err(Error::Shape(format!(
            "patch is {}x{}, model expects {}x{}",
            p.frames(),
            p.bands(),
            arch.input_frames,
            arch.input_bands
        )));
    }
    if !p.is_standardized() {
        return Err(Error::InvalidInput("model input must be standardized".into()));
    }
    Ok(())
}

/// Stacks standardized patches into an `n x 1 x frames x bands` batch.
pub fn patches_to_tensor<F: Scalar>(patches: &[&SpectrogramPatch], arch: &ArchConfig) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(patches.len() * arch.input_frames * arch.input_bands);
    for p in patches {
        check_patch(p, arch)?;
        data.extend(p.values().iter().map(|&v| F::from_f64_lossy(v)));
    }
    Ok(Tensor::from_vec(patches.len(), 1, arch.input_frames, arch.input_bands, data))
}

/// Read-only inference wrapper: network structure plus `f32` weights.
#[derive(Debug, Clone)]
pub struct Embedder {
    net: Network,
    weights: Weights<f32>,
    masks: MaskSet,
}

impl Embedder {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.arch.validate()?;
        let net = params.network();
        let weights = params.to_weights(&net)?;
        let masks = MaskSet::new(params.arch.embedding_dim)?;
        Ok(Self { net, weights, masks })
    }

    pub fn arch(&self) -> &ArchConfig {
        self.net.arch()
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn embed_batch(&self, patches: &[&SpectrogramPatch]) -> Result<Vec<EmbeddingVector>> {
        const CHUNK: usize = 32;
        let d = self.net.embedding_dim();
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(CHUNK) {
            let x = patches_to_tensor::<f32>(chunk, self.arch())?;
            let f = self.net.forward(&self.weights, x, Mode::Eval);
            out.extend(
                f.embeddings
                    .chunks(d)
                    .map(|e| EmbeddingVector::new(e.iter().map(|&v| v as f64).collect())),
            );
        }
        Ok(out)
    }

    pub fn embed(&self, patch: &SpectrogramPatch) -> Result<EmbeddingVector> {
        Ok(self.embed_batch(&[patch])?.remove(0))
    }
}

/// Forward pass of a single patch. Training mode normalizes with the patch's own
/// statistics and leaves `params` untouched.
pub fn embed(p: &SpectrogramPatch, params: &ModelParams, mode: Mode) -> Result<EmbeddingVector> {
    let net = params.network();
    let weights: Weights<f32> = params.to_weights(&net)?;
    let x = patches_to_tensor::<f32>(&[p], &params.arch)?;
    let out = net.forward(&weights, x, mode);
    Ok(EmbeddingVector::new(out.embeddings.iter().map(|&v| v as f64).collect()))
}

pub fn masked_embed(p: &SpectrogramPatch, params: &ModelParams, mask: &DimensionMask) -> Result<EmbeddingVector> {
    embed(p, params, Mode::Eval)?.masked(mask)
}

/// A saved model: parameters plus the feature settings it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub features: FeatureConfig,
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    arch: ArchConfig,
    seed: u64,
    step: u64,
    config_hash: String,
    features: FeatureConfig,
}

pub fn config_hash(arch: &ArchConfig, features: &FeatureConfig) -> String {
    let canonical = serde_json::json!({"arch": arch, "features": features});
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        config_hash(&self.params.arch, &self.features)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            arch: self.params.arch.clone(),
            seed: self.params.seed,
            step: self.step,
            config_hash: self.config_hash(),
            features: self.features.clone(),
        };
        Ok(Container {
            meta: serde_json::to_value(meta)?,
            arrays: self.params.tensors.values().cloned().collect(),
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta)?;
        if meta.kind != "checkpoint" {
            return Err(Error::Container(format!("expected a checkpoint, found '{}'", meta.kind)));
        }
        if config_hash(&meta.arch, &meta.features) != meta.config_hash {
            return Err(Error::Container("config hash mismatch".into()));
        }
        let params = ModelParams {
            arch: meta.arch,
            seed: meta.seed,
            tensors: c.arrays.into_iter().map(|a| (a.name.clone(), a)).collect(),
        };
        params.to_weights::<f32>(&params.network())?;
        Ok(Self {
            params,
            features: meta.features,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}
