use std::collections::BTreeSet;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use csr_core::data::Split;
use csr_core::reasoning::explain_maps;
use csr_core::{ExplanationBundle, ImageSize, InteractionSpec, PixelBox, Prediction, PrototypeId};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::ApiError;
use crate::state::{AppState, InteractResult, Session};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: AppState) -> Router {
    let static_dir = state.0.config.static_dir.clone().unwrap_or_else(|| state.0.data.manifest.root.clone());
    Router::new()
        .route("/api/v1/samples", get(samples))
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/interact", post(interact))
        .route("/api/v1/atlas", get(atlas))
        .route("/api/v1/atlas/discard", post(discard))
        .nest_service("/static", ServeDir::new(static_dir))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub id: String,
    pub image_size: ImageSize,
    pub split: Split,
    /// Withheld for the test split.
    pub target_class: Option<usize>,
    pub target_hidden: bool,
    pub has_boxes: bool,
}

async fn samples(State(state): State<AppState>) -> Json<Vec<SampleSummary>> {
    let mut out: Vec<SampleSummary> = state
        .0
        .data
        .manifest
        .samples
        .iter()
        .map(|s| {
            let hidden = s.split == Split::Test;
            SampleSummary {
                id: s.id.clone(),
                image_size: s.image_size,
                split: s.split,
                target_class: (!hidden).then_some(s.target_class),
                target_hidden: hidden,
                has_boxes: !s.concept_boxes.is_empty(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRequest {
    sample_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub sample_id: String,
    pub atlas_version: u64,
    pub prediction: Prediction,
    pub indecisive: bool,
    pub explanation: ExplanationBundle,
}

async fn predict(
    State(state): State<AppState>,
    body: Result<Json<SampleRequest>, JsonRejection>,
) -> ApiResult<PredictResponse> {
    let Json(req) = body?;
    let index = state.sample_index(&req.sample_id)?;
    let atlas = state.atlas()?;
    let (maps, prediction) = state.baseline(index, &atlas)?;
    Ok(Json(PredictResponse {
        sample_id: req.sample_id,
        atlas_version: atlas.version,
        indecisive: prediction.indecisive,
        prediction,
        explanation: explain_maps(&maps, &atlas.atlas),
    }))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    sample_id: String,
    #[serde(default)]
    idempotency_key: Option<String>,
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Result<Json<SessionRequest>, JsonRejection>,
) -> ApiResult<Session> {
    let Json(req) = body?;
    let header_key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok());
    let key = req.idempotency_key.as_deref().or(header_key);
    Ok(Json(state.create_session(&req.sample_id, key)?))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Session> {
    Ok(Json(state.session(&id)?))
}

/// An interact body; `alpha` falls back to the configured default.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct InteractRequest {
    #[serde(default)]
    positive_boxes: Vec<PixelBox>,
    #[serde(default)]
    negative_boxes: Vec<PixelBox>,
    alpha: Option<f64>,
    #[serde(default)]
    rejected_concepts: BTreeSet<usize>,
}

async fn interact(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<InteractRequest>, JsonRejection>,
) -> ApiResult<InteractResult> {
    let Json(req) = body?;
    let spec = InteractionSpec {
        positive_boxes: req.positive_boxes,
        negative_boxes: req.negative_boxes,
        alpha: req.alpha.unwrap_or(state.0.config.alpha),
        rejected_concepts: req.rejected_concepts,
    };
    Ok(Json(state.interact(&id, spec)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub id: String,
    pub concept: usize,
    pub concept_name: String,
    pub m: usize,
    pub discarded: bool,
    pub provenance: Option<csr_core::prototypes::Provenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasResponse {
    pub version: u64,
    pub num_concepts: usize,
    pub per_concept: usize,
    pub prototypes: Vec<PrototypeEntry>,
}

async fn atlas(State(state): State<AppState>) -> ApiResult<AtlasResponse> {
    let current = state.atlas()?;
    let a = &current.atlas;
    let names = &state.0.data.manifest.concept_names;
    let prototypes = (0..a.len())
        .map(|i| {
            let id = a.id_of(i);
            PrototypeEntry {
                id: id.to_string(),
                concept: id.k,
                concept_name: names.get(id.k).cloned().unwrap_or_default(),
                m: id.m,
                discarded: a.is_discarded(i),
                provenance: a.provenance(i).cloned(),
            }
        })
        .collect();
    Ok(Json(AtlasResponse {
        version: current.version,
        num_concepts: a.num_concepts(),
        per_concept: a.per_concept(),
        prototypes,
    }))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscardRequest {
    prototype_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardResponse {
    pub version: u64,
    pub discarded: Vec<String>,
}

async fn discard(
    State(state): State<AppState>,
    body: Result<Json<DiscardRequest>, JsonRejection>,
) -> ApiResult<DiscardResponse> {
    let Json(req) = body?;
    let ids = req
        .prototype_ids
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.parse::<PrototypeId>().map_err(|e| {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_prototype", e.to_string())
                    .with_field(format!("prototype_ids[{i}]"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let next = state.discard(&ids)?;
    let a = &next.atlas;
    Ok(Json(DiscardResponse {
        version: next.version,
        discarded: (0..a.len()).filter(|&i| a.is_discarded(i)).map(|i| a.id_of(i).to_string()).collect(),
    }))
}
