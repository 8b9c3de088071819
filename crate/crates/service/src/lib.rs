//! Read-only HTTP retrieval service over a built pair index.
//!
//! Routes: `POST /search`, `GET /pairs/{pair_id}`, `GET /labels`, `GET /health`.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tsdiff_core::nn::DualEncoder;
use tsdiff_core::perturb::{
    Characteristic, PairSample, PerturbLevel, PerturbParams, RelationshipLabel,
};
use tsdiff_core::query::instantiate_template;
use tsdiff_core::retrieval::{search, Index};
use tsdiff_core::storage::fingerprint;

pub const MAX_PREVIEW: usize = 512;
pub const DEFAULT_K: usize = 10;

/// Everything a ready service answers from.
pub struct Loaded {
    model: DualEncoder<f32>,
    index: Index,
    pairs: HashMap<String, PairSample>,
}

impl Loaded {
    /// Checks that the index was built by this model and that every indexed
    /// pair is present in the pair store.
    pub fn new(
        model: DualEncoder<f32>,
        index: Index,
        pairs: Vec<PairSample>,
    ) -> tsdiff_core::Result<Self> {
        let fp = fingerprint(&model);
        if fp != index.fingerprint {
            return Err(tsdiff_core::Error::Data(format!(
                "index fingerprint {} does not match checkpoint {fp}",
                index.fingerprint
            )));
        }
        let mut map: HashMap<String, PairSample> =
            pairs.into_iter().map(|p| (p.pair_id.clone(), p)).collect();
        if let Some(e) = index.entries.iter().find(|e| !map.contains_key(&e.pair_id)) {
            return Err(tsdiff_core::Error::Data(format!(
                "indexed pair {} missing from the dataset",
                e.pair_id
            )));
        }
        map.retain(|id, _| index.entries.iter().any(|e| &e.pair_id == id));
        Ok(Self {
            model,
            index,
            pairs: map,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.index.fingerprint
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    /// The ranking behind `POST /search`, without HTTP.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<ResultItem>, ApiError> {
        if query.trim().is_empty() {
            return Err(ApiError::bad_request("query must not be empty"));
        }
        if k == 0 || k > self.index.len() {
            return Err(ApiError::bad_request(format!(
                "k must be in 1..={}",
                self.index.len()
            )));
        }
        let q = self
            .model
            .embed_texts(&[query])
            .map_err(ApiError::internal)?;
        let ranked = search(&self.index, &q[0], k).map_err(ApiError::internal)?;
        Ok(ranked
            .hits
            .into_iter()
            .map(|h| {
                let p = &self.pairs[&h.pair_id];
                ResultItem {
                    pair_id: h.pair_id,
                    score: h.score,
                    label: h.label,
                    characteristic: p.characteristic,
                    target_level: p.target_level,
                    ref_preview: preview(p.reference.values()),
                    tgt_preview: preview(p.target.values()),
                }
            })
            .collect())
    }
}

/// Every `ceil(n / 512)`-th sample, starting with the first.
pub fn preview(values: &[f64]) -> Vec<f64> {
    let stride = values.len().div_ceil(MAX_PREVIEW).max(1);
    values.iter().step_by(stride).copied().collect()
}

/// Shared handle; empty until [`AppState::set_ready`] is called.
#[derive(Clone, Default)]
pub struct AppState {
    loaded: Arc<OnceLock<Arc<Loaded>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::new();
        s.set_ready(loaded);
        s
    }

    /// Install the loaded state; later calls are ignored.
    pub fn set_ready(&self, loaded: Loaded) {
        let _ = self.loaded.set(Arc::new(loaded));
    }

    pub fn get(&self) -> Option<Arc<Loaded>> {
        self.loaded.get().cloned()
    }

    fn require(&self) -> Result<Arc<Loaded>, ApiError> {
        self.get().ok_or(ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: "service is still loading".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(m: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: m.into(),
        }
    }

    fn internal(e: tsdiff_core::Error) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub pair_id: String,
    pub score: f64,
    pub label: RelationshipLabel,
    pub characteristic: Characteristic,
    pub target_level: PerturbLevel,
    pub ref_preview: Vec<f64>,
    pub tgt_preview: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub results: Vec<ResultItem>,
    pub fingerprint: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub base_id: String,
    pub label: RelationshipLabel,
    pub characteristic: Characteristic,
    pub target_level: PerturbLevel,
    pub params_ref: PerturbParams,
    pub params_tgt: PerturbParams,
    pub reference: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label: RelationshipLabel,
    pub characteristic: Characteristic,
    pub direction: PerturbLevel,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub fingerprint: Option<String>,
    pub index_size: usize,
}

/// The static relationship table.
pub fn label_table() -> Vec<LabelEntry> {
    RelationshipLabel::all()
        .map(|l| LabelEntry {
            label: l,
            characteristic: l.characteristic(),
            direction: l.target_level(),
            template: instantiate_template(l.characteristic(), l.target_level()),
        })
        .collect()
}

async fn search_handler(
    State(state): State<AppState>,
    Json(req): Json<SearchRequest>,
) -> Result<Json<SearchResponse>, ApiError> {
    let loaded = state.require()?;
    let start = Instant::now();
    let fp = loaded.fingerprint().to_string();
    let results = tokio::task::spawn_blocking(move || loaded.search(&req.query, req.k))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        })??;
    Ok(Json(SearchResponse {
        results,
        fingerprint: fp,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn pair_handler(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<PairRecord>, ApiError> {
    let loaded = state.require()?;
    let p = loaded.pairs.get(&id).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("unknown pair {id}"),
    })?;
    Ok(Json(PairRecord {
        pair_id: p.pair_id.clone(),
        base_id: p.base_id.clone(),
        label: p.label,
        characteristic: p.characteristic,
        target_level: p.target_level,
        params_ref: p.params_ref.clone(),
        params_tgt: p.params_tgt.clone(),
        reference: p.reference.values().to_vec(),
        target: p.target.values().to_vec(),
    }))
}

async fn labels_handler() -> Json<Vec<LabelEntry>> {
    Json(label_table())
}

async fn health_handler(State(state): State<AppState>) -> Json<Health> {
    Json(match state.get() {
        Some(l) => Health {
            status: "ready".into(),
            fingerprint: Some(l.fingerprint().to_string()),
            index_size: l.index.len(),
        },
        None => Health {
            status: "loading".into(),
            fingerprint: None,
            index_size: 0,
        },
    })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/search", post(search_handler))
        .route("/pairs/{pair_id}", get(pair_handler))
        .route("/labels", get(labels_handler))
        .route("/health", get(health_handler))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(state: AppState, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
