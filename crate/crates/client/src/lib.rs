//! Thin async client for the retrieval service, plus the JSON types both
//! sides of the wire share.

pub mod api;

use base64::Engine;
use reqwest::StatusCode;

pub use api::{ClipQuery, ErrorBody, Health, QueryRequest, QueryResponse, QueryResult, QuerySpec, Tags, TrackInfo, TrackQuery, Weights};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),

    #[error("server returned {status}: {message}")]
    Api { status: StatusCode, message: String },

    #[error("invalid base url: {0}")]
    BaseUrl(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let base = base.into().trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(ClientError::BaseUrl(base));
        }
        Ok(Self {
            base,
            http: reqwest::Client::new(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api { status, message })
    }

    pub async fn health(&self) -> Result<Health> {
        let resp = self.http.get(self.url("/api/health")).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn tracks(&self) -> Result<Vec<TrackInfo>> {
        let resp = self.http.get(self.url("/api/tracks")).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn query(&self, req: &QueryRequest) -> Result<QueryResponse> {
        let resp = self.http.post(self.url("/api/query")).json(req).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn query_track(&self, track_id: &str, weights: Weights, k: usize) -> Result<QueryResponse> {
        self.query(&QueryRequest {
            query: QuerySpec::Track(TrackQuery {
                track_id: track_id.to_string(),
            }),
            weights,
            k,
        })
        .await
    }

    /// Queries with raw WAV bytes.
    pub async fn query_clip(&self, wav: &[u8], weights: Weights, k: usize) -> Result<QueryResponse> {
        self.query(&QueryRequest {
            query: QuerySpec::Clip(ClipQuery {
                clip_b64: base64::engine::general_purpose::STANDARD.encode(wav),
            }),
            weights,
            k,
        })
        .await
    }

    pub async fn audio(&self, track_id: &str) -> Result<Vec<u8>> {
        let resp = self
            .http
            .get(self.url(&format!("/api/audio/{track_id}")))
            .send()
            .await?;
        Ok(Self::check(resp).await?.bytes().await?.to_vec())
    }
}
