//! Axum service exposing weighted query-by-example retrieval over an
//! [`EmbeddingIndex`].

mod error;

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use musim_client::{Health, QueryRequest, QueryResponse, QueryResult, QuerySpec, Tags, TrackInfo, Weights};
use musim_core::audio::decode_wav_bytes;
use musim_core::corpus::Corpus;
use musim_core::index::{build_index, embed_clip, EmbeddingIndex, IndexEntry, Query, WeightProfile};
use musim_core::model::{Checkpoint, Embedder};
use tower_http::services::ServeDir;

pub use error::ApiError;

/// Uploaded clips arrive base64-encoded inside JSON.
const BODY_LIMIT_BYTES: usize = 64 * 1024 * 1024;

/// Model used to embed uploaded clips.
pub struct ClipModel {
    ckpt: Checkpoint,
    embedder: Embedder,
}

impl ClipModel {
    pub fn new(ckpt: Checkpoint) -> musim_core::Result<Self> {
        let embedder = Embedder::new(&ckpt.params)?;
        Ok(Self { ckpt, embedder })
    }
}

/// Shared service state. Readers clone the current index `Arc`; a rebuild
/// swaps it in one step, serialized behind `writer`.
pub struct AppState {
    index: RwLock<Arc<EmbeddingIndex>>,
    writer: tokio::sync::Mutex<()>,
    clip: Option<Arc<ClipModel>>,
}

impl AppState {
    /// Fails when the clip model is not the checkpoint the index was built with.
    pub fn new(index: EmbeddingIndex, clip: Option<ClipModel>) -> musim_core::Result<Self> {
        if let Some(c) = &clip {
            index.check_checkpoint(&c.ckpt)?;
        }
        Ok(Self {
            index: RwLock::new(Arc::new(index)),
            writer: tokio::sync::Mutex::new(()),
            clip: clip.map(Arc::new),
        })
    }

    pub fn index(&self) -> Arc<EmbeddingIndex> {
        self.index.read().expect("index lock poisoned").clone()
    }

    pub async fn replace_index(&self, index: EmbeddingIndex) -> musim_core::Result<()> {
        let _guard = self.writer.lock().await;
        self.swap(index)
    }

    fn swap(&self, index: EmbeddingIndex) -> musim_core::Result<()> {
        if let Some(c) = &self.clip {
            index.check_checkpoint(&c.ckpt)?;
        }
        *self.index.write().expect("index lock poisoned") = Arc::new(index);
        Ok(())
    }

    /// Re-embeds `corpus` with the clip model's checkpoint and swaps the
    /// result in; queries keep using the old index until then. Returns the
    /// tracks that failed.
    pub async fn rebuild(&self, corpus: Corpus, built_at: u64) -> musim_core::Result<Vec<(String, musim_core::Error)>> {
        let clip = self
            .clip
            .clone()
            .ok_or_else(|| musim_core::Error::InvalidInput("rebuilding needs a checkpoint".into()))?;
        let _guard = self.writer.lock().await;
        let (index, failures) = tokio::task::spawn_blocking(move || build_index(&corpus, &clip.ckpt, built_at))
            .await
            .map_err(|e| musim_core::Error::InvalidInput(format!("rebuild task failed: {e}")))??;
        self.swap(index)?;
        Ok(failures)
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/tracks", get(tracks))
        .route("/api/query", post(query))
        .route("/api/audio/{id}", get(audio))
        .layer(DefaultBodyLimit::max(BODY_LIMIT_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn tags(e: &IndexEntry) -> Tags {
    Tags {
        genre: e.genre.iter().cloned().collect(),
        mood: e.mood.iter().cloned().collect(),
        instruments: e.instruments.iter().cloned().collect(),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let index = state.index();
    Json(Health {
        status: "ok".into(),
        tracks: index.len(),
        fingerprint: index.fingerprint.clone(),
        clip_queries: state.clip.is_some(),
    })
}

async fn tracks(State(state): State<Arc<AppState>>) -> Json<Vec<TrackInfo>> {
    let index = state.index();
    Json(
        index
            .entries()
            .iter()
            .map(|e| TrackInfo {
                id: e.track_id.clone(),
                title: e.track_id.clone(),
                tags: tags(e),
                bpm: e.bpm,
            })
            .collect(),
    )
}

fn weight_profile(w: Weights) -> Result<WeightProfile, ApiError> {
    Ok(WeightProfile::new(w.genre, w.mood, w.instruments, w.tempo)?)
}

async fn query(
    State(state): State<Arc<AppState>>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<QueryResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let weights = weight_profile(req.weights)?;
    if req.k == 0 {
        return Err(ApiError::BadRequest("k must be at least 1".into()));
    }
    let index = state.index();
    let q = match req.query {
        QuerySpec::Track(t) => Query::Track(t.track_id),
        QuerySpec::Clip(c) => {
            let model = state
                .clip
                .clone()
                .ok_or_else(|| ApiError::BadRequest("clip queries need the server to be started with a checkpoint".into()))?;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(c.clip_b64.as_bytes())
                .map_err(|e| ApiError::BadRequest(format!("clip_b64 is not valid base64: {e}")))?;
            let embedding = tokio::task::spawn_blocking(move || {
                let w = decode_wav_bytes(&bytes, model.ckpt.features.sample_rate)?;
                embed_clip(&w, &model.ckpt, &model.embedder)
            })
            .await
            .map_err(|e| ApiError::Internal(format!("embedding task failed: {e}")))??;
            Query::Embedding(embedding)
        }
    };
    let hits = index.query(&q, &weights, req.k, true)?;
    let results = hits
        .into_iter()
        .map(|h| {
            let e = index.get(&h.track_id).expect("hits come from the index");
            QueryResult {
                track_id: h.track_id,
                distance: h.distance,
                tags: tags(e),
                bpm: e.bpm,
            }
        })
        .collect();
    Ok(Json(QueryResponse { results }))
}

async fn audio(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let index = state.index();
    let entry = index
        .get(&id)
        .ok_or_else(|| ApiError::NotFound(format!("track '{id}' is not in the index")))?;
    let bytes = tokio::fs::read(&entry.audio_path)
        .await
        .map_err(|e| ApiError::NotFound(format!("audio for '{id}' is unavailable: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes))
}
