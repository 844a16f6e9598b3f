//! Optimization loop: Adam, plateau-based learning-rate reduction, early
//! stopping and resumable training state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedArray};
use crate::corpus::{Corpus, FeatureStore, Split, Triplet, TripletSampler};
use crate::dimension::{Condition, Dimension};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::losses::{combined_loss_and_grad, LossConfig, TripletRows};
use crate::model::layers::BnUpdate;
use crate::model::{Checkpoint, Embedder, MaskSet, Mode, ModelParams, Network, Scalar, Tensor, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub patience_epochs: usize,
    pub max_reductions: usize,
    /// Minimum decrease of the best validation loss that counts as improvement.
    pub min_delta: f64,
    /// Category triplets per condition in every optimizer step.
    pub category_per_condition: usize,
    pub track_batch: usize,
    pub max_epochs: usize,
    /// Triplets per epoch; defaults to ten times the corpus track count.
    pub epoch_triplets: Option<usize>,
    /// Frozen validation triplets per condition (track included).
    pub validation_per_condition: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            lr_factor: 0.2,
            patience_epochs: 4,
            max_reductions: 5,
            min_delta: 1e-6,
            category_per_condition: 4,
            track_batch: 8,
            max_epochs: 100,
            epoch_triplets: None,
            validation_per_condition: 64,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        if self.category_per_condition == 0 && self.track_batch == 0 {
            return bad("at least one batch size must be positive");
        }
        if self.max_epochs == 0 || self.validation_per_condition == 0 || self.epoch_triplets == Some(0) {
            return bad("max_epochs, validation_per_condition and epoch_triplets must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters");
        }
        Ok(())
    }

    fn triplets_per_step(&self) -> usize {
        4 * self.category_per_condition + self.track_batch
    }

    pub fn steps_per_epoch(&self, corpus_tracks: usize) -> usize {
        let total = self.epoch_triplets.unwrap_or(10 * corpus_tracks).max(1);
        total.div_ceil(self.triplets_per_step())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleAction {
    Improved,
    Continue,
    Reduced,
    Stop,
}

/// Reduce-on-plateau bookkeeping. The learning rate is always
/// `initial_lr * lr_factor^reductions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub patience: usize,
    pub max_reductions: usize,
    pub min_delta: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            initial_lr: cfg.initial_lr,
            lr_factor: cfg.lr_factor,
            patience: cfg.patience_epochs,
            max_reductions: cfg.max_reductions,
            min_delta: cfg.min_delta,
            best: None,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr * self.lr_factor.powi(self.reductions as i32)
    }

    /// Feeds one epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64) -> ScheduleAction {
        let improved = match self.best {
            None => true,
            Some(b) => val_loss <= b - self.min_delta,
        };
        if improved {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
            return ScheduleAction::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return ScheduleAction::Continue;
        }
        if self.reductions < self.max_reductions {
            self.reductions += 1;
            self.bad_epochs = 0;
            ScheduleAction::Reduced
        } else {
            ScheduleAction::Stop
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Reductions applied before this epoch started.
    pub reductions: usize,
    pub action: ScheduleAction,
    /// Kept out of `history.jsonl` so that file stays reproducible.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|e| e.action == ScheduleAction::Improved)
            .next_back()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_jsonl(path, &self.epochs)
    }
}

/// Adam moments, one buffer per parameter tensor (untrainable ones stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Weights<f32>,
    pub v: Weights<f32>,
}

impl Adam {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Weights::zeros_like(net.specs()),
            v: Weights::zeros_like(net.specs()),
        }
    }

    pub fn step(&mut self, net: &Network, weights: &mut Weights<f32>, grads: &Weights<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (id, spec) in net.specs().iter().enumerate() {
            if !spec.role.trainable() {
                continue;
            }
            let w = &mut weights.tensors[id];
            let m = &mut self.m.tensors[id];
            let v = &mut self.v.tensors[id];
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grads.tensors[id]) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Train-mode objective on a batch of patches together with parameter
/// gradients and the batch-norm statistics the pass produced.
#[allow(clippy::type_complexity)]
pub fn loss_and_grads<F: Scalar>(
    net: &Network,
    weights: &Weights<F>,
    x: Tensor<F>,
    category: &[TripletRows],
    track: &[TripletRows],
    masks: &MaskSet,
    loss: &LossConfig,
) -> Result<(F, Weights<F>, Vec<BnUpdate<F>>)> {
    let out = net.forward(weights, x, Mode::Train);
    let (value, d_emb) = combined_loss_and_grad(&out.embeddings, net.embedding_dim(), category, track, masks, loss)?;
    let mut trace = out.trace.expect("train-mode trace");
    let updates = std::mem::take(&mut trace.updates);
    let mut grads = Weights::zeros_like(net.specs());
    net.backward(weights, trace, &d_emb, &mut grads);
    Ok((value, grads, updates))
}

/// Stacks the patches of `triplets` (anchor, positive, negative per triplet)
/// into one batch tensor and returns the row layout.
pub fn triplet_batch(
    store: &FeatureStore,
    category: &[Triplet],
    track: &[Triplet],
) -> Result<(Tensor<f32>, Vec<TripletRows>, Vec<TripletRows>)> {
    let cfg = store.config();
    let size = cfg.patch_frames * cfg.mel_bands;
    let n = 3 * (category.len() + track.len());
    let mut x = Tensor::zeros(n, 1, cfg.patch_frames, cfg.mel_bands);
    let mut rows = Vec::with_capacity(category.len() + track.len());
    for (i, t) in category.iter().chain(track).enumerate() {
        for (j, r) in [&t.anchor, &t.positive, &t.negative].into_iter().enumerate() {
            let k = 3 * i + j;
            store.write_patch_f32(r, &mut x.data[k * size..(k + 1) * size])?;
        }
        rows.push(TripletRows {
            anchor: 3 * i,
            positive: 3 * i + 1,
            negative: 3 * i + 2,
            condition: t.condition,
        });
    }
    let track_rows = rows.split_off(category.len());
    Ok((x, rows, track_rows))
}

/// Frozen validation triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    pub category: Vec<Triplet>,
    pub track: Vec<Triplet>,
}

impl ValidationSet {
    pub fn sample(corpus: &Corpus, store: &FeatureStore, per_condition: usize, seed: u64) -> Result<Self> {
        let sampler = split_sampler(corpus, store, Split::Valid);
        let mut rng = stream_rng(seed, VALIDATION_STREAM);
        let mut category = Vec::with_capacity(4 * per_condition);
        for d in Dimension::ALL {
            category.extend(sampler.sample_many(d.into(), per_condition, &mut rng)?);
        }
        let track = sampler.sample_many(Condition::Track, per_condition, &mut rng)?;
        Ok(Self { category, track })
    }

    pub fn is_empty(&self) -> bool {
        self.category.is_empty() && self.track.is_empty()
    }
}

/// Mean combined loss of the frozen set in eval mode.
pub fn validate(params: &ModelParams, store: &FeatureStore, set: &ValidationSet, loss: &LossConfig) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    crate::losses::combined_loss(&set.category, &set.track, store, &Embedder::new(params)?, loss)
}

const VALIDATION_STREAM: u64 = 0;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn split_sampler<'a>(corpus: &'a Corpus, store: &FeatureStore, split: Split) -> TripletSampler<'a> {
    TripletSampler::new(corpus.in_split(split), |id| store.frames(id), store.config().patch_frames)
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub best: ModelParams,
    pub adam: Adam,
    pub schedule: PlateauSchedule,
    pub history: TrainHistory,
    pub epoch: usize,
    pub step: u64,
    pub stopped: bool,
    pub features: FeatureConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    kind: String,
    arch: crate::model::ArchConfig,
    seed: u64,
    features: FeatureConfig,
    schedule: PlateauSchedule,
    history: TrainHistory,
    wall_secs: Vec<f64>,
    epoch: usize,
    step: u64,
    stopped: bool,
    adam_t: u64,
}

impl TrainState {
    pub fn to_container(&self) -> Result<Container> {
        let net = self.params.network();
        let named = |prefix: &str, w: &Weights<f32>| -> Vec<NamedArray> {
            net.specs()
                .iter()
                .zip(&w.tensors)
                .map(|(s, t)| NamedArray {
                    name: format!("{prefix}/{}", s.name),
                    shape: s.shape.clone(),
                    data: t.clone(),
                })
                .collect()
        };
        let mut arrays = Vec::new();
        arrays.extend(named("param", &self.params.to_weights(&net)?));
        arrays.extend(named("best", &self.best.to_weights(&net)?));
        arrays.extend(named("adam_m", &self.adam.m));
        arrays.extend(named("adam_v", &self.adam.v));
        let meta = StateMeta {
            kind: "train_state".into(),
            arch: self.params.arch.clone(),
            seed: self.params.seed,
            features: self.features.clone(),
            schedule: self.schedule.clone(),
            history: self.history.clone(),
            wall_secs: self.history.epochs.iter().map(|e| e.wall_secs).collect(),
            epoch: self.epoch,
            step: self.step,
            stopped: self.stopped,
            adam_t: self.adam.t,
        };
        Ok(Container {
            meta: serde_json::to_value(meta)?,
            arrays,
        })
    }

    pub fn from_container(c: Container, cfg: &TrainConfig) -> Result<Self> {
        let meta: StateMeta = serde_json::from_value(c.meta)?;
        if meta.kind != "train_state" {
            return Err(Error::Container(format!("expected a training state, found '{}'", meta.kind)));
        }
        let net = Network::new(&meta.arch);
        let mut arrays: std::collections::HashMap<String, NamedArray> =
            c.arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
        let mut take = |prefix: &str| -> Result<Weights<f32>> {
            let tensors = net
                .specs()
                .iter()
                .map(|s| {
                    let a = arrays
                        .remove(&format!("{prefix}/{}", s.name))
                        .ok_or_else(|| Error::Container(format!("missing array {prefix}/{}", s.name)))?;
                    if a.shape != s.shape {
                        return Err(Error::Shape(format!("{prefix}/{}: shape {:?}", s.name, a.shape)));
                    }
                    Ok(a.data)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Weights { tensors })
        };
        let params = ModelParams::from_weights(&net, &take("param")?, meta.seed);
        let best = ModelParams::from_weights(&net, &take("best")?, meta.seed);
        let mut adam = Adam::new(&net, cfg);
        adam.m = take("adam_m")?;
        adam.v = take("adam_v")?;
        adam.t = meta.adam_t;
        let mut history = meta.history;
        for (e, w) in history.epochs.iter_mut().zip(meta.wall_secs) {
            e.wall_secs = w;
        }
        Ok(Self {
            params,
            best,
            adam,
            schedule: meta.schedule,
            history,
            epoch: meta.epoch,
            step: meta.step,
            stopped: meta.stopped,
            features: meta.features,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        Self::from_container(Container::read(path)?, cfg)
    }

    pub fn best_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.best.clone(),
            features: self.features.clone(),
            step: self.step,
        }
    }
}

pub struct Trainer<'a> {
    corpus: &'a Corpus,
    store: &'a FeatureStore,
    loss: LossConfig,
    cfg: TrainConfig,
    net: Network,
    masks: MaskSet,
    weights: Weights<f32>,
    state: TrainState,
    validation: ValidationSet,
    diagnostics_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        corpus: &'a Corpus,
        store: &'a FeatureStore,
        params: ModelParams,
        loss: LossConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let net = params.network();
        let state = TrainState {
            best: params.clone(),
            adam: Adam::new(&net, &cfg),
            schedule: PlateauSchedule::new(&cfg),
            history: TrainHistory::default(),
            epoch: 0,
            step: 0,
            stopped: false,
            features: store.config().clone(),
            params,
        };
        Self::resume(corpus, store, state, loss, cfg)
    }

    pub fn resume(
        corpus: &'a Corpus,
        store: &'a FeatureStore,
        state: TrainState,
        loss: LossConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        state.params.arch.validate()?;
        if &state.features != store.config() {
            return Err(Error::Config("feature settings differ from the training state".into()));
        }
        let a = &state.params.arch;
        if (a.input_frames, a.input_bands) != (store.config().patch_frames, store.config().mel_bands) {
            return Err(Error::Config("model input shape does not match the feature patch shape".into()));
        }
        let net = state.params.network();
        let weights = state.params.to_weights(&net)?;
        let masks = MaskSet::new(a.embedding_dim)?;
        if split_sampler(corpus, store, Split::Train).pool_size() < 2 {
            return Err(Error::Training("the train split needs at least two usable tracks".into()));
        }
        let validation = ValidationSet::sample(corpus, store, cfg.validation_per_condition, cfg.seed)?;
        Ok(Self {
            corpus,
            store,
            loss,
            cfg,
            net,
            masks,
            weights,
            state,
            validation,
            diagnostics_dir: None,
        })
    }

    /// Where a diagnostic state is written if the loss becomes non-finite.
    pub fn with_diagnostics_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.diagnostics_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn validation_set(&self) -> &ValidationSet {
        &self.validation
    }

    pub fn is_finished(&self) -> bool {
        self.state.stopped || self.state.epoch >= self.cfg.max_epochs
    }

    fn sync_params(&mut self) {
        self.state.params = ModelParams::from_weights(&self.net, &self.weights, self.state.params.seed);
    }

    fn abort_non_finite(&mut self, what: &str) -> Error {
        self.sync_params();
        let mut msg = format!("non-finite {what} in epoch {} at step {}", self.state.epoch + 1, self.state.step);
        if let Some(dir) = &self.diagnostics_dir {
            let path = dir.join("diagnostic.state");
            match self.state.save(&path) {
                Ok(()) => msg.push_str(&format!("; state written to {}", path.display())),
                Err(e) => msg.push_str(&format!("; writing diagnostic state failed: {e}")),
            }
        }
        Error::Training(msg)
    }

    /// Runs one epoch; returns `None` once training has finished.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let started = Instant::now();
        let epoch = self.state.epoch;
        let sampler = split_sampler(self.corpus, self.store, Split::Train);
        let mut rng = stream_rng(self.cfg.seed, epoch as u64 + 1);
        let lr = self.state.schedule.lr();
        let reductions = self.state.schedule.reductions;
        let steps = self.cfg.steps_per_epoch(self.corpus.len());
        let mut loss_sum = 0.0;
        for _ in 0..steps {
            let mut category = Vec::with_capacity(4 * self.cfg.category_per_condition);
            for _ in 0..self.cfg.category_per_condition {
                for d in Dimension::ALL {
                    category.push(sampler.sample_category(d, &mut rng)?);
                }
            }
            let track = sampler.sample_many(Condition::Track, self.cfg.track_batch, &mut rng)?;
            let (x, cat_rows, track_rows) = triplet_batch(self.store, &category, &track)?;
            let (value, grads, updates) =
                loss_and_grads(&self.net, &self.weights, x, &cat_rows, &track_rows, &self.masks, &self.loss)?;
            if !value.is_finite() {
                return Err(self.abort_non_finite("training loss"));
            }
            self.state.adam.step(&self.net, &mut self.weights, &grads, lr);
            self.net.apply_bn_updates(&mut self.weights, &updates);
            self.state.step += 1;
            loss_sum += value as f64;
        }
        if self.weights.tensors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(self.abort_non_finite("parameters"));
        }
        self.sync_params();
        let val_loss = validate(&self.state.params, self.store, &self.validation, &self.loss)?;
        if !val_loss.is_finite() {
            return Err(self.abort_non_finite("validation loss"));
        }
        let action = self.state.schedule.observe(val_loss);
        if action == ScheduleAction::Improved {
            self.state.best = self.state.params.clone();
        }
        self.state.stopped = action == ScheduleAction::Stop;
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / steps as f64,
            val_loss,
            lr,
            reductions,
            action,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        tracing::info!(
            epoch = record.epoch,
            train_loss = record.train_loss,
            val_loss = record.val_loss,
            lr = record.lr,
            ?action,
            secs = record.wall_secs,
            "epoch finished"
        );
        self.state.history.epochs.push(record.clone());
        Ok(Some(record))
    }

    /// Runs until the schedule stops or `max_epochs` is reached.
    pub fn run(&mut self) -> Result<()> {
        while self.run_epoch()?.is_some() {}
        Ok(())
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

/// Trains from `params` and returns the best-validation parameters with the
/// epoch history.
pub fn train(
    corpus: &Corpus,
    store: &FeatureStore,
    params: ModelParams,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(corpus, store, params, loss.clone(), cfg.clone())?;
    trainer.run()?;
    let state = trainer.into_state();
    Ok((state.best, state.history))
}
