use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use musim_client::{Client, QueryResponse, Weights};
use musim_core::audio::{read_wav, write_wav};
use musim_core::corpus::{
    generate_synthetic_corpus, load_metadata, Corpus, FeatureStore, Split, TripletSampler, Vocabulary,
};
use musim_core::dimension::{Condition, Dimension};
use musim_core::evaluation::vq::{sample_frames, VqSource};
use musim_core::evaluation::{
    evaluate as score, filter_user_triplets, vq_fit, ModelSource, Space, TripletSets, UserAnnotationSet, UserTriplet,
    AGREEMENT_THRESHOLD,
};
use musim_core::features::{FeatureConfig, FeatureExtractor};
use musim_core::fsutil::write_atomic;
use musim_core::index::{build_index, EmbeddingIndex};
use musim_core::model::{init_params, ArchConfig, Checkpoint, Embedder};
use musim_core::training::{TrainState, Trainer};
use musim_service::{AppState, ClipModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::FileConfig;
use crate::{CliError, Common, CorpusArgs};

type CmdResult = Result<(), CliError>;

fn load_config(common: &Common) -> Result<FileConfig, CliError> {
    FileConfig::load(common.config.as_deref()).map_err(CliError::Usage)
}

fn require_out(common: &Common) -> Result<&Path, CliError> {
    common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this subcommand".into()))
}

fn vocabulary(dir: Option<&Path>) -> Result<Vocabulary, CliError> {
    Ok(match dir {
        Some(d) => Vocabulary::from_dir(d)?,
        None => Vocabulary::builtin(),
    })
}

fn load_corpus(args: &CorpusArgs) -> Result<Corpus, CliError> {
    let vocab = vocabulary(args.vocab.as_deref())?;
    Ok(load_metadata(&args.metadata, &vocab)?)
}

/// Log-mel features for every track; unreadable tracks are reported and skipped.
fn features_for(corpus: &Corpus, cfg: &FeatureConfig) -> Result<FeatureStore, CliError> {
    let (store, failures) = FeatureStore::from_corpus(corpus, cfg)?;
    for (id, e) in &failures {
        tracing::warn!("skipping track {id}: {e}");
    }
    if store.is_empty() {
        return Err(CliError::Runtime("no track could be read".into()));
    }
    Ok(store)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of tracks (config `synth.tracks`, default 200).
    #[arg(long)]
    tracks: Option<usize>,
    /// Seconds per track (config `synth.duration_secs`, default 6).
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let out = require_out(&a.common)?;
    let mut spec = cfg.synth.clone().unwrap_or_default();
    if let Some(n) = a.tracks {
        spec.tracks = n;
    }
    if let Some(d) = a.duration {
        spec.duration_secs = d;
    }
    let vocab = vocabulary(a.vocab.as_deref())?;
    spec.validate(&vocab).map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = cfg.seed(a.common.seed);
    let synth = generate_synthetic_corpus(&spec, &vocab, seed)?;
    for t in &synth.tracks {
        write_wav(&out.join(&t.meta.audio_path), &t.waveform)?;
    }
    synth.corpus(&vocab)?.write_jsonl(&out.join("metadata.jsonl"))?;
    write_json(&out.join("synth.json"), &spec)?;
    eprintln!("wrote {} synthetic tracks to {}", synth.tracks.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Triplets per condition (config `sample.per_condition`, default 1000).
    #[arg(long)]
    per_condition: Option<usize>,
    /// Split to draw tracks from (config `sample.split`, default test).
    #[arg(long)]
    split: Option<Split>,
    /// Sample conflict triplets instead: the positive matches the anchor
    /// only along the probed dimension. No track set is written.
    #[arg(long)]
    conflict: bool,
}

pub fn sample(a: SampleArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let out = require_out(&a.common)?;
    let per = a.per_condition.or(cfg.sample.per_condition).unwrap_or(1000);
    let split = a.split.or(cfg.sample.split).unwrap_or(Split::Test);
    let features = cfg.features();
    let corpus = load_corpus(&a.corpus)?;
    let tracks: Vec<_> = corpus.in_split(split).collect();
    let mut frames = HashMap::new();
    for t in &tracks {
        match read_wav(Path::new(&t.audio_path), features.sample_rate) {
            Ok(w) => {
                frames.insert(t.track_id.clone(), features.frame_count(w.len()));
            }
            Err(e) => tracing::warn!("skipping track {}: {e}", t.track_id),
        }
    }
    let sampler = TripletSampler::new(tracks.iter().copied(), |id| frames.get(id).copied(), features.patch_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed(a.common.seed));
    let mut sets = TripletSets::default();
    for d in Dimension::ALL {
        let ts = if a.conflict {
            (0..per).map(|_| sampler.sample_conflict(d, &mut rng)).collect::<Result<Vec<_>, _>>()?
        } else {
            sampler.sample_many(d.into(), per, &mut rng)?
        };
        sets.sets.insert(d.into(), ts);
    }
    if !a.conflict {
        sets.sets.insert(Condition::Track, sampler.sample_many(Condition::Track, per, &mut rng)?);
    }
    sets.write_dir(out)?;
    eprintln!(
        "wrote {per} triplets per condition from {} {split:?} tracks to {}",
        sampler.pool_size(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Architecture preset, full or tiny (config `train.preset`, default full).
    #[arg(long)]
    preset: Option<String>,
    /// Track-regularization weight (config `train.loss.lambda`, default 0.5).
    #[arg(long)]
    lambda: Option<f64>,
    /// Epoch cap (config `train.optimizer.max_epochs`, default 100).
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Continue from `<out>/state.bin`.
    #[arg(long)]
    resume: bool,
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let out = require_out(&a.common)?;
    let seed = cfg.seed(a.common.seed);
    let preset = a.preset.or(cfg.train.preset.clone()).unwrap_or_else(|| "full".into());
    let arch = ArchConfig::preset(&preset).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut loss = cfg.train.loss.unwrap_or_default();
    if let Some(l) = a.lambda {
        loss.lambda = l;
    }
    let mut opt = cfg.train.optimizer.clone().unwrap_or_default();
    opt.seed = seed;
    if let Some(e) = a.max_epochs {
        opt.max_epochs = e;
    }
    loss.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    opt.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let features = cfg.features();
    let corpus = load_corpus(&a.corpus)?;
    let store = features_for(&corpus, &features)?;
    let state_path = out.join("state.bin");
    let trainer = if a.resume {
        let state = TrainState::load(&state_path, &opt)?;
        Trainer::resume(&corpus, &store, state, loss, opt)?
    } else {
        Trainer::new(&corpus, &store, init_params(&arch, seed)?, loss, opt)?
    };
    let mut trainer = trainer.with_diagnostics_dir(out);
    while let Some(record) = trainer.run_epoch()? {
        trainer.state().save(&state_path)?;
        trainer.state().best_checkpoint().save(&out.join("checkpoint.bin"))?;
        trainer.state().history.write_jsonl(&out.join("history.jsonl"))?;
        eprintln!(
            "epoch {} train {:.5} valid {:.5} lr {:.2e} {:?}",
            record.epoch, record.train_loss, record.val_loss, record.lr, record.action
        );
    }
    let state = trainer.into_state();
    state.best_checkpoint().save(&out.join("checkpoint.bin"))?;
    state.history.write_jsonl(&out.join("history.jsonl"))?;
    let best = state.history.best_epoch().map(|r| r.epoch).unwrap_or(0);
    eprintln!("training finished; best epoch {best}; checkpoint in {}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of `<condition>.jsonl` triplet files.
    #[arg(long)]
    triplets: PathBuf,
    /// all or sub (config `evaluate.space`, default sub).
    #[arg(long)]
    space: Option<Space>,
    /// Listener triplets (JSONL of triplet_id, anchor, positive, negative).
    #[arg(long, requires = "annotations")]
    user_triplets: Option<PathBuf>,
    /// Vote tallies (JSONL of triplet_id, votes_p, votes_n).
    #[arg(long, requires = "user_triplets")]
    annotations: Option<PathBuf>,
}

/// Restricts `corpus` to the tracks referenced by `sets` and `user`.
fn referenced(corpus: &Corpus, sets: &TripletSets, user: &[UserTriplet], vocab: &Vocabulary) -> Result<Corpus, CliError> {
    let mut ids: Vec<&str> = sets
        .sets
        .values()
        .flatten()
        .flat_map(|t| [&t.anchor.track, &t.positive.track, &t.negative.track])
        .map(String::as_str)
        .chain(user.iter().flat_map(|u| [u.anchor.as_str(), u.positive.as_str(), u.negative.as_str()]))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let tracks = ids
        .into_iter()
        .map(|id| {
            corpus
                .get(id)
                .cloned()
                .ok_or_else(|| CliError::Runtime(format!("triplets reference unknown track '{id}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(tracks, vocab)?)
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let out = require_out(&a.common)?;
    let space = a.space.or(cfg.evaluate.space).unwrap_or(Space::Sub);
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let vocab = vocabulary(a.corpus.vocab.as_deref())?;
    let corpus = load_metadata(&a.corpus.metadata, &vocab)?;
    let sets = TripletSets::read_dir(&a.triplets)?;
    let user = match (&a.user_triplets, &a.annotations) {
        (Some(t), Some(n)) => {
            let kept = filter_user_triplets(&UserAnnotationSet::load(n)?, AGREEMENT_THRESHOLD);
            UserTriplet::select(&UserTriplet::load(t)?, &kept)
        }
        _ => Vec::new(),
    };
    let needed = referenced(&corpus, &sets, &user, &vocab)?;
    let store = features_for(&needed, &ckpt.features)?;
    let embedder = Embedder::new(&ckpt.params)?;
    let source = ModelSource::new(&embedder, &store);
    let user_arg = (!user.is_empty()).then_some(user.as_slice());
    let report = score(&source, &sets, user_arg, space, Some(embedder.masks()))?;
    write_json(out, &report)?;
    eprintln!(
        "{space:?}: genre {:.3} mood {:.3} instruments {:.3} tempo {:.3} overall {:.3}",
        report.genre, report.mood, report.instruments, report.tempo, report.overall
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct VqArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Directory of `<condition>.jsonl` triplet files.
    #[arg(long)]
    triplets: PathBuf,
    /// Codebook size (config `vq.k`, default 1024).
    #[arg(long)]
    k: Option<usize>,
    /// Frames sampled for fitting (config `vq.sample_frames`).
    #[arg(long)]
    sample_frames: Option<usize>,
}

pub fn vq_baseline(a: VqArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let out = require_out(&a.common)?;
    let mut vq = cfg.vq.clone().unwrap_or_default();
    vq.seed = cfg.seed(a.common.seed);
    if let Some(k) = a.k {
        vq.k = k;
    }
    if let Some(n) = a.sample_frames {
        vq.sample_frames = n;
    }
    let features = cfg.features();
    let corpus = load_corpus(&a.corpus)?;
    let sets = TripletSets::read_dir(&a.triplets)?;
    let ex = FeatureExtractor::new(features.clone())?;
    let mut mfcc = HashMap::new();
    for t in corpus.tracks() {
        match read_wav(Path::new(&t.audio_path), features.sample_rate).and_then(|w| ex.mfcc(&w)) {
            Ok(m) => {
                mfcc.insert(t.track_id.clone(), m);
            }
            Err(e) => tracing::warn!("skipping track {}: {e}", t.track_id),
        }
    }
    let (frames, dim) = sample_frames(&mfcc, &vq)?;
    let codebook = vq_fit(&frames, dim, &vq)?;
    codebook.save(&out.join("codebook.bin"))?;
    let source = VqSource::new(&codebook, &mfcc, features.patch_frames)?;
    let report = score(&source, &sets, None, Space::All, None)?;
    write_json(&out.join("report.json"), &report)?;
    eprintln!(
        "vq k={} ({} iterations): genre {:.3} mood {:.3} instruments {:.3} tempo {:.3}",
        codebook.k, codebook.iterations, report.genre, report.mood, report.instruments, report.tempo
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    ckpt: PathBuf,
}

/// `SOURCE_DATE_EPOCH` when set (reproducible builds), else the current time.
fn build_time() -> Result<u64, CliError> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("SOURCE_DATE_EPOCH is not an integer: '{v}'"))),
        Err(_) => Ok(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)),
    }
}

pub fn index(a: IndexArgs) -> CmdResult {
    let _cfg = load_config(&a.common)?;
    let out = require_out(&a.common)?;
    let built_at = build_time()?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let corpus = load_corpus(&a.corpus)?;
    let (index, failures) = build_index(&corpus, &ckpt, built_at)?;
    for (id, e) in &failures {
        eprintln!("failed to index {id}: {e}");
    }
    index.save(out)?;
    eprintln!("indexed {} of {} tracks into {}", index.len(), corpus.len(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    index: PathBuf,
    /// Listen port; 0 picks a free one (config `serve.port`, default 8080).
    #[arg(long)]
    port: Option<u16>,
    /// Listen address (config `serve.host`, default 127.0.0.1).
    #[arg(long)]
    host: Option<String>,
    /// Directory of built UI assets served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Checkpoint the index was built with; enables clip queries.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let cfg = load_config(&a.common)?;
    let port = a.port.or(cfg.serve.port).unwrap_or(8080);
    let host = a.host.or(cfg.serve.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
    let index = EmbeddingIndex::load(&a.index)?;
    let clip = match &a.ckpt {
        Some(p) => Some(ClipModel::new(Checkpoint::load(p)?)?),
        None => None,
    };
    let state = Arc::new(AppState::new(index, clip)?);
    let app = musim_service::router(state, a.static_dir.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(out) = &a.common.out {
            write_atomic(out, format!("{addr}\n").as_bytes())?;
        }
        eprintln!("listening on http://{addr}");
        musim_service::serve(listener, app)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    common: Common,
    /// Server root URL.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
    /// Query by indexed track id.
    #[arg(long, conflicts_with = "clip", required_unless_present = "clip")]
    track: Option<String>,
    /// Query by a WAV file.
    #[arg(long)]
    clip: Option<PathBuf>,
    /// genre,mood,instruments,tempo weights.
    #[arg(long, default_value = "1,1,1,1", value_parser = parse_weights)]
    weights: Weights,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

fn parse_weights(s: &str) -> Result<Weights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [genre, mood, instruments, tempo] => Ok(Weights {
            genre,
            mood,
            instruments,
            tempo,
        }),
        _ => Err("expected four comma-separated weights".into()),
    }
}

pub fn query(a: QueryArgs) -> CmdResult {
    let _cfg = load_config(&a.common)?;
    let client = Client::new(a.server.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let clip = match &a.clip {
        Some(p) => Some(std::fs::read(p).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    let resp: QueryResponse = rt
        .block_on(async {
            match (&a.track, &clip) {
                (Some(id), _) => client.query_track(id, a.weights, a.k).await,
                (None, Some(bytes)) => client.query_clip(bytes, a.weights, a.k).await,
                (None, None) => unreachable!("clap requires --track or --clip"),
            }
        })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    match &a.common.out {
        Some(out) => write_json(out, &resp)?,
        None => println!("{}", serde_json::to_string_pretty(&resp).map_err(|e| CliError::Runtime(e.to_string()))?),
    }
    Ok(())
}
