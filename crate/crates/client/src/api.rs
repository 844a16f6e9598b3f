//! Request and response bodies of the JSON API.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tags {
    pub genre: Vec<String>,
    pub mood: Vec<String>,
    pub instruments: Vec<String>,
}

/// One row of `GET /api/tracks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub id: String,
    pub title: String,
    pub tags: Tags,
    pub bpm: f64,
}

/// Per-dimension weights; each defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    pub genre: f64,
    pub mood: f64,
    pub instruments: f64,
    pub tempo: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            genre: 1.0,
            mood: 1.0,
            instruments: 1.0,
            tempo: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackQuery {
    pub track_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipQuery {
    /// Base64 (standard alphabet) encoded WAV file.
    pub clip_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuerySpec {
    Track(TrackQuery),
    Clip(ClipQuery),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub query: QuerySpec,
    #[serde(default)]
    pub weights: Weights,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub track_id: String,
    pub distance: f64,
    pub tags: Tags,
    pub bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub tracks: usize,
    pub fingerprint: String,
    pub clip_queries: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
