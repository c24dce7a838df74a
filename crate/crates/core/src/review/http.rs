//! JSON REST API under `/v1`.

use std::collections::HashMap;
use std::future::Future;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{annotations_jsonl, QueueCounts, ReasonFeedback, ReviewCase, ReviewError, ReviewStore, Vote};
use crate::featurize::{format_number, BinningModel, UNKNOWN};
use crate::metrics::{build_report, default_segments, ReportInputs, ThresholdGrid};
use crate::pipeline::Assistant;
use crate::schema::{validate_record, FeatureKind, FeatureSchema, FeatureValue, Label, Polarity, TransactionRecord};

pub const REVIEWER_HEADER: &str = "x-reviewer-id";

#[derive(Clone)]
pub struct ServiceState {
    pub store: Arc<ReviewStore>,
    pub assistant: Arc<Assistant>,
}

impl ServiceState {
    fn schema(&self) -> &FeatureSchema {
        &self.assistant.schema
    }

    fn model(&self) -> &BinningModel {
        &self.assistant.model
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    status: Option<u16>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
            status: Some(status.as_u16()),
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "Validation", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self
            .status
            .and_then(|s| StatusCode::from_u16(s).ok())
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, code) = match &e {
            ReviewError::UnknownCase(_) => (StatusCode::NOT_FOUND, "UnknownCase"),
            ReviewError::NotInReview { .. } => (StatusCode::CONFLICT, "NotInReview"),
            ReviewError::WrongReviewer { .. } => (StatusCode::CONFLICT, "WrongReviewer"),
            ReviewError::UnknownReason { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "UnknownReason"),
            ReviewError::Invalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, "Validation"),
            ReviewError::Corrupt { .. } | ReviewError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Storage"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::validation(e.body_text())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
}

/// One row of the feature table shown to reviewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub description: String,
    pub value: FeatureValue,
    pub bucket: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    #[serde(flatten)]
    pub case: ReviewCase,
    pub features: Vec<FeatureRow>,
}

pub fn feature_table(record: &TransactionRecord, schema: &FeatureSchema, model: &BinningModel) -> Vec<FeatureRow> {
    schema
        .ordered_features()
        .into_iter()
        .map(|spec| {
            let value = record.value(&spec.id);
            let bucket = match spec.kind {
                FeatureKind::Numeric => Some(match value.as_number() {
                    Some(v) => model
                        .bucket(&spec.id, v)
                        .map(|b| b.as_str().to_string())
                        .unwrap_or_else(|_| format_number(v)),
                    None => UNKNOWN.to_string(),
                }),
                _ => None,
            };
            FeatureRow {
                id: spec.id.clone(),
                description: spec.description.clone(),
                value,
                bucket,
            }
        })
        .collect()
}

fn view(state: &ServiceState, case: ReviewCase) -> CaseView {
    let features = feature_table(&case.record, state.schema(), state.model());
    CaseView { case, features }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EnqueueBody {
    Wrapped { records: Vec<serde_json::Value> },
    Bare(Vec<serde_json::Value>),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnqueueResult {
    pub record_id: Option<String>,
    pub case_id: Option<String>,
    pub created: bool,
    #[serde(default)]
    pub unparsed: bool,
    pub error: Option<ApiError>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnqueueResponse {
    pub accepted: usize,
    pub rejected: usize,
    pub results: Vec<EnqueueResult>,
}

fn failed(record_id: Option<String>, code: &str, message: String) -> EnqueueResult {
    EnqueueResult {
        record_id,
        case_id: None,
        created: false,
        unparsed: false,
        error: Some(ApiError {
            code: code.into(),
            message,
            status: None,
        }),
    }
}

async fn enqueue(
    State(state): State<ServiceState>,
    body: Result<Json<EnqueueBody>, JsonRejection>,
) -> Result<Json<EnqueueResponse>, ApiError> {
    let Json(body) = body?;
    let raw = match body {
        EnqueueBody::Wrapped { records } | EnqueueBody::Bare(records) => records,
    };
    let response = blocking(move || -> Result<EnqueueResponse, ApiError> {
        let mut results: Vec<Option<EnqueueResult>> = Vec::new();
        let mut to_assess = Vec::new();
        for value in raw {
            let record: Result<TransactionRecord, String> = serde_json::from_value(value)
                .map_err(|e| e.to_string())
                .and_then(|r| validate_record(r, state.schema()).map_err(|e| e.to_string()));
            match record {
                Err(message) => results.push(Some(failed(None, "Validation", message))),
                Ok(r) => {
                    results.push(None);
                    to_assess.push((results.len() - 1, r));
                }
            }
        }
        let fresh: Vec<(usize, TransactionRecord)> = to_assess
            .iter()
            .filter(|(_, r)| !state.store.contains_record(&r.id))
            .cloned()
            .collect();
        let records: Vec<TransactionRecord> = fresh.iter().map(|(_, r)| r.clone()).collect();
        let assessed = state
            .assistant
            .assess_all(&records, state.assistant.gateway.max_in_flight());
        let mut items = Vec::new();
        for ((slot, record), outcome) in fresh.into_iter().zip(assessed) {
            match outcome {
                Ok(a) => items.push((record, a.output)),
                Err(e) => results[slot] = Some(failed(Some(record.id.clone()), "Backend", e.to_string())),
            }
        }
        let mut created: HashMap<String, bool> = state
            .store
            .enqueue(items)?
            .into_iter()
            .filter(|o| o.created)
            .map(|o| (o.record_id, true))
            .collect();
        let snap = state.store.snapshot();
        for (slot, record) in to_assess {
            if results[slot].is_some() {
                continue;
            }
            results[slot] = Some(match snap.case_for_record(&record.id) {
                Some(c) => EnqueueResult {
                    record_id: Some(record.id.clone()),
                    case_id: Some(c.case_id.clone()),
                    created: created.remove(&record.id).is_some(),
                    unparsed: c.assistant.unparsed(),
                    error: None,
                },
                None => failed(Some(record.id), "Internal", "record was not stored".into()),
            });
        }
        let results: Vec<EnqueueResult> = results.into_iter().map(|r| r.expect("every slot filled")).collect();
        let rejected = results.iter().filter(|r| r.error.is_some()).count();
        Ok(EnqueueResponse {
            accepted: results.len() - rejected,
            rejected,
            results,
        })
    })
    .await??;
    Ok(Json(response))
}

#[derive(Deserialize)]
struct ReviewerQuery {
    reviewer: Option<String>,
}

fn reviewer_id(query: Option<String>, headers: &HeaderMap) -> Result<String, ApiError> {
    query
        .or_else(|| {
            headers
                .get(REVIEWER_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .filter(|r| !r.trim().is_empty())
        .ok_or_else(|| ApiError::validation(format!("reviewer id required (query `reviewer` or header {REVIEWER_HEADER})")))
}

async fn next_case(
    State(state): State<ServiceState>,
    Query(q): Query<ReviewerQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let reviewer = reviewer_id(q.reviewer, &headers)?;
    let store = state.store.clone();
    match blocking(move || store.next_case(&reviewer)).await?? {
        Some(case) => Ok(Json(view(&state, case)).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

#[derive(Deserialize)]
struct VerdictBody {
    reviewer: Option<String>,
    verdict: Label,
}

async fn submit_verdict(
    State(state): State<ServiceState>,
    Path(case_id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<VerdictBody>, JsonRejection>,
) -> Result<Json<CaseView>, ApiError> {
    let Json(body) = body?;
    let reviewer = reviewer_id(body.reviewer, &headers)?;
    let store = state.store.clone();
    let case = blocking(move || store.submit_verdict(&case_id, &reviewer, body.verdict)).await??;
    Ok(Json(view(&state, case)))
}

#[derive(Deserialize)]
struct FeedbackBody {
    reviewer: Option<String>,
    polarity: Polarity,
    reason_index: usize,
    rating: Vote,
    note: Option<String>,
}

async fn submit_feedback(
    State(state): State<ServiceState>,
    Path(case_id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<FeedbackBody>, JsonRejection>,
) -> Result<(StatusCode, Json<ReasonFeedback>), ApiError> {
    let Json(body) = body?;
    let reviewer = reviewer_id(body.reviewer, &headers).ok();
    let feedback = ReasonFeedback {
        case_id,
        polarity: body.polarity,
        reason_index: body.reason_index,
        rating: body.rating,
        note: body.note.filter(|n| !n.trim().is_empty()),
        reviewer,
    };
    let store = state.store.clone();
    let stored = feedback.clone();
    blocking(move || store.submit_feedback(stored)).await??;
    Ok((StatusCode::CREATED, Json(feedback)))
}

async fn get_case(State(state): State<ServiceState>, Path(case_id): Path<String>) -> Result<Json<CaseView>, ApiError> {
    let case = state
        .store
        .snapshot()
        .case(&case_id)
        .map(|c| (**c).clone())
        .ok_or(ReviewError::UnknownCase(case_id))?;
    Ok(Json(view(&state, case)))
}

async fn queue(State(state): State<ServiceState>) -> Json<QueueCounts> {
    Json(state.store.snapshot().counts())
}

async fn metrics_report(State(state): State<ServiceState>) -> Result<Response, ApiError> {
    let report = blocking(move || {
        let (predictions, gold) = state.store.decided_pairs();
        if predictions.is_empty() {
            return Ok(json!({
                "notice": "no decided cases yet",
                "counts": state.store.snapshot().counts(),
            }));
        }
        let annotations = state.store.export_decisions();
        let segments = default_segments();
        let grid = ThresholdGrid::default();
        build_report(&ReportInputs {
            predictions: &predictions,
            gold: &gold,
            annotations: Some(&annotations),
            schema: state.schema(),
            model: state.model(),
            segments: &segments,
            grid: &grid,
            corpus: "review-queue",
        })
        .map(|r| serde_json::to_value(r).expect("report serializes"))
        .map_err(|e| ApiError::validation(e.to_string()))
    })
    .await??;
    Ok(Json(report).into_response())
}

async fn export_decisions(State(state): State<ServiceState>) -> Result<Response, ApiError> {
    let annotations = blocking(move || state.store.export_decisions()).await?;
    let body = annotations_jsonl(&annotations);
    let mut resp = body.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    headers.insert("x-record-count", HeaderValue::from(annotations.len()));
    Ok(resp)
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/v1/transactions", post(enqueue))
        .route("/v1/review/next", get(next_case))
        .route("/v1/review/{case_id}/verdict", post(submit_verdict))
        .route("/v1/review/{case_id}/feedback", post(submit_feedback))
        .route("/v1/cases/{case_id}", get(get_case))
        .route("/v1/queue", get(queue))
        .route("/v1/metrics/report", get(metrics_report))
        .route("/v1/export/decisions", get(export_decisions))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: ServiceState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
