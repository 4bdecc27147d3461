//! HTTP JSON API over an immutable model snapshot and gallery.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::data::{self, Dataset, Example};
use crate::error::{Error, Result};
use crate::intervention::{intervene_explicit, InterventionValues};
use crate::model::{AnyModel, Checkpoint};
use crate::retrieval::{self, EncodedSplit, Gallery, GridResult};

/// Largest accepted `/grid` axis.
pub const MAX_GRID_AXIS: usize = 6;
pub const DEFAULT_K: usize = 10;

/// Everything a request may read. Built once, never mutated.
#[derive(Debug)]
pub struct SessionState {
    pub model: AnyModel,
    pub values: Option<InterventionValues>,
    pub model_hash: String,
    pub dataset: Dataset,
    pub eval: EncodedSplit,
    pub gallery: Gallery,
    pub gallery_seed: u64,
}

impl SessionState {
    /// Builds the gallery from the unseen-class split at `gallery_fraction`.
    pub fn new(ck: Checkpoint, model_hash: String, dataset: &Dataset, gallery_fraction: f64, gallery_seed: u64) -> Result<Self> {
        let dims = ck.model.dims();
        if dataset.input_dim() != dims.input_dim || dataset.num_concepts() != dims.num_concepts {
            return Err(Error::Validation(format!(
                "checkpoint expects input_dim {} and {} concepts; dataset has input_dim {} and {} concepts",
                dims.input_dim,
                dims.num_concepts,
                dataset.input_dim(),
                dataset.num_concepts()
            )));
        }
        let eval_set = data::retrieval_split(dataset)?.eval;
        let eval = EncodedSplit::new(&ck.model, &eval_set)?;
        let gallery = retrieval::gallery_from_encoded(&ck.model, &eval, ck.intervention_values.as_ref(), gallery_fraction, gallery_seed)?;
        Ok(SessionState {
            model: ck.model,
            values: ck.intervention_values,
            model_hash,
            dataset: dataset.clone(),
            eval,
            gallery,
            gallery_seed,
        })
    }

    fn item(&self, id: u64) -> Option<&Example> {
        self.dataset.get(id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct HttpError {
    status: StatusCode,
    body: ApiError,
}

impl HttpError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        HttpError {
            status,
            body: ApiError {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<Error> for HttpError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(_) | Error::Dimension { .. } | Error::Index(_) => Self::bad_request(e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl From<JsonRejection> for HttpError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, HttpError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: String,
    pub gallery_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptInfo {
    pub index: usize,
    pub name: String,
    pub intervention_high: f64,
    pub intervention_low: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub dim: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub l2_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemInfo {
    pub id: u64,
    pub label: usize,
    pub features: FeatureSummary,
    pub true_concepts: Vec<u8>,
    pub concept_logits: Option<Vec<f64>>,
    pub concept_activations: Option<Vec<f64>>,
    pub predicted_class: usize,
    pub in_gallery: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    #[serde(default)]
    pub query_id: Option<u64>,
    #[serde(default)]
    pub features: Option<Vec<f64>>,
    /// Concept index → forced truth value (0 or 1).
    #[serde(default)]
    pub interventions: BTreeMap<usize, u8>,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub id: u64,
    pub distance: f64,
    pub label: usize,
    /// Same label as the query; `None` for raw-feature queries.
    pub matches: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub query_id: Option<u64>,
    pub query_label: Option<usize>,
    pub k: usize,
    pub truncated: bool,
    pub results: Vec<RetrievedItem>,
    /// Concept vector fused into the query embedding.
    pub c_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRequest {
    pub gallery_fractions: Vec<f64>,
    pub query_fractions: Vec<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

/// Ranks the gallery for one query with explicit concept overrides. The
/// service handler is a thin wrapper over this.
pub fn retrieve(state: &SessionState, req: &RetrieveRequest) -> Result<RetrieveResponse> {
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(Error::Validation("k must be >= 1".into()));
    }
    let (x, query_label) = match (&req.query_id, &req.features) {
        (Some(id), None) => {
            let e = state.item(*id).ok_or_else(|| Error::Index(format!("unknown item id {id}")))?;
            (e.x.clone(), Some(e.y))
        }
        (None, Some(f)) => (f.clone(), None),
        _ => return Err(Error::Validation("exactly one of query_id and features is required".into())),
    };
    let base = state.model.base(&x)?;
    let c_hat = match &base.concepts {
        Some(c) if !req.interventions.is_empty() => {
            let forced = forced_map(&req.interventions)?;
            let values = state
                .values
                .as_ref()
                .ok_or_else(|| Error::State("checkpoint has no intervention values".into()))?;
            Some(intervene_explicit(&c.activations, &forced, values)?)
        }
        Some(c) => Some(c.activations.clone()),
        None if !req.interventions.is_empty() => {
            return Err(Error::Validation(format!("{} model has no concepts to intervene on", state.model.kind())));
        }
        None => None,
    };
    let embedding = state.model.embedding(&base, c_hat.as_deref())?;
    let res = retrieval::top_k(&state.gallery, &embedding, k, req.query_id)?;
    let results = res
        .ids
        .iter()
        .zip(&res.distances)
        .zip(&res.labels)
        .map(|((&id, &distance), &label)| RetrievedItem {
            id,
            distance,
            label,
            matches: query_label.map(|y| y == label),
        })
        .collect();
    Ok(RetrieveResponse {
        query_id: req.query_id,
        query_label,
        k,
        truncated: res.truncated,
        results,
        c_hat,
    })
}

fn forced_map(m: &BTreeMap<usize, u8>) -> Result<BTreeMap<usize, bool>> {
    m.iter()
        .map(|(&i, &v)| match v {
            0 => Ok((i, false)),
            1 => Ok((i, true)),
            other => Err(Error::Validation(format!("intervention value for concept {i} must be 0 or 1, got {other}"))),
        })
        .collect()
}

pub fn item_info(state: &SessionState, id: u64) -> Result<ItemInfo> {
    let e = state.item(id).ok_or_else(|| Error::Index(format!("unknown item id {id}")))?;
    let base = state.model.base(&e.x)?;
    let c = base.concepts.as_ref().map(|c| c.activations.as_slice());
    let predicted_class = state.model.predict(&base, c)?;
    let n = e.x.len() as f64;
    Ok(ItemInfo {
        id,
        label: e.y,
        features: FeatureSummary {
            dim: e.x.len(),
            mean: e.x.iter().sum::<f64>() / n,
            min: e.x.iter().copied().fold(f64::INFINITY, f64::min),
            max: e.x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            l2_norm: e.x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        },
        true_concepts: e.c.clone(),
        concept_logits: base.concepts.as_ref().map(|c| c.logits.clone()),
        concept_activations: base.concepts.as_ref().map(|c| c.activations.clone()),
        predicted_class,
        in_gallery: state.gallery.position(id).is_some(),
    })
}

pub fn concepts(state: &SessionState) -> Vec<ConceptInfo> {
    match &state.values {
        Some(v) => (0..v.len())
            .map(|i| ConceptInfo {
                index: i,
                name: format!("concept_{i}"),
                intervention_high: v.high[i],
                intervention_low: v.low[i],
            })
            .collect(),
        None => Vec::new(),
    }
}

pub fn grid(state: &SessionState, req: &GridRequest) -> std::result::Result<GridResult, HttpError> {
    if req.gallery_fractions.len() > MAX_GRID_AXIS || req.query_fractions.len() > MAX_GRID_AXIS {
        return Err(HttpError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "grid_too_large",
            format!("grid axes are limited to {MAX_GRID_AXIS} fractions each"),
        ));
    }
    let seeds = req.seeds.clone().unwrap_or_else(|| vec![state.gallery_seed]);
    let k = req.k.unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(HttpError::bad_request("k must be >= 1"));
    }
    Ok(retrieval::intervention_grid(
        &state.model,
        &state.eval,
        state.values.as_ref(),
        &req.gallery_fractions,
        &req.query_fractions,
        k,
        &seeds,
    )?)
}

fn not_found_or(e: Error) -> HttpError {
    match e {
        Error::Index(m) => HttpError::new(StatusCode::NOT_FOUND, "not_found", m),
        other => other.into(),
    }
}

async fn health(State(s): State<Arc<SessionState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        model_hash: s.model_hash.clone(),
        gallery_size: s.gallery.len(),
    })
}

async fn get_concepts(State(s): State<Arc<SessionState>>) -> Json<Vec<ConceptInfo>> {
    Json(concepts(&s))
}

async fn get_item(State(s): State<Arc<SessionState>>, Path(id): Path<String>) -> ApiResult<ItemInfo> {
    let id: u64 = id
        .parse()
        .map_err(|_| HttpError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown item id {id}")))?;
    item_info(&s, id).map(Json).map_err(not_found_or)
}

async fn post_retrieve(
    State(s): State<Arc<SessionState>>,
    body: std::result::Result<Json<RetrieveRequest>, JsonRejection>,
) -> ApiResult<RetrieveResponse> {
    let Json(req) = body?;
    retrieve(&s, &req).map(Json).map_err(not_found_or)
}

async fn post_grid(
    State(s): State<Arc<SessionState>>,
    body: std::result::Result<Json<GridRequest>, JsonRejection>,
) -> ApiResult<GridResult> {
    let Json(req) = body?;
    tokio::task::spawn_blocking(move || grid(&s, &req))
        .await
        .map_err(|e| HttpError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map(Json)
}

pub fn router(state: Arc<SessionState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/concepts", get(get_concepts))
        .route("/item/{id}", get(get_item))
        .route("/retrieve", post(post_retrieve))
        .route("/grid", post(post_grid))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(state: SessionState, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::State(format!("cannot bind {addr}: {e}")))?;
    let local = listener.local_addr().map_err(|e| Error::State(e.to_string()))?;
    eprintln!("listening on http://{local}");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::State(format!("server error: {e}")))
}
