//! Public HTTP surface of the gateway.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use peros_core::lm::EvalReport;
use peros_core::ApiRegistry;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{Decision, EvalOutcome, Gateway, GatewayError, NewSession};
use crate::session::{FeedBody, FeedItem, TranscriptItem};

pub struct ApiError(GatewayError);

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            GatewayError::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session-not-found"),
            GatewayError::WorkspaceUnavailable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "workspace-unavailable"),
            GatewayError::NoPendingCheckpoint { .. } => (StatusCode::CONFLICT, "no-pending-checkpoint"),
            GatewayError::BackendUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "backend-unavailable"),
            GatewayError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad-request"),
            GatewayError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        (status, Json(json!({ "error": code, "detail": self.0.to_string() }))).into_response()
    }
}

type Shared = State<Arc<Gateway>>;

/// Engine calls block on disk, git and the actuator.
async fn blocking<T: Send + 'static>(
    gw: &Arc<Gateway>,
    f: impl FnOnce(&Gateway) -> Result<T, GatewayError> + Send + 'static,
) -> Result<T, ApiError> {
    let gw = gw.clone();
    tokio::task::spawn_blocking(move || f(&gw))
        .await
        .map_err(|e| ApiError(GatewayError::Internal(format!("handler panicked: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub workspace: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
}

async fn create_session(State(gw): Shared, Json(req): Json<NewSession>) -> Result<impl IntoResponse, ApiError> {
    let s = blocking(&gw, move |g| g.create_session(&req)).await?;
    let body = SessionCreated { id: s.id, workspace: s.workspace.display().to_string(), user: s.user };
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Debug, Deserialize)]
struct MessageReq {
    text: String,
}

async fn post_message(
    State(gw): Shared,
    Path(id): Path<String>,
    Json(req): Json<MessageReq>,
) -> Result<Json<TranscriptItem>, ApiError> {
    blocking(&gw, move |g| g.post_message(&id, &req.text)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct DecisionReq {
    decision: Decision,
}

async fn decide(
    State(gw): Shared,
    Path((id, plan, index)): Path<(String, String, usize)>,
    Json(req): Json<DecisionReq>,
) -> Result<Json<TranscriptItem>, ApiError> {
    blocking(&gw, move |g| g.decide_checkpoint(&id, &plan, index, req.decision)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
    /// Keep the stream open for new items; on by default.
    follow: Option<bool>,
}

fn sse_event(item: &FeedItem) -> Event {
    let kind = match &item.body {
        FeedBody::Message(_) => "message",
        FeedBody::Event { .. } => "event",
        FeedBody::Recommendation { .. } => "recommendation",
    };
    Event::default().id(item.seq.to_string()).event(kind).json_data(item).expect("feed item serializes")
}

struct Tail {
    gw: Arc<Gateway>,
    id: String,
    queue: VecDeque<FeedItem>,
    cursor: u64,
    follow: bool,
    poll: Duration,
}

async fn events(
    State(gw): Shared,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let resume_from = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse().ok());
    let since = q.since.or(resume_from).unwrap_or(0);
    let sid = id.clone();
    let first = blocking(&gw, move |g| g.events(&sid, since)).await?;
    let tail = Tail {
        poll: Duration::from_millis(gw.config().poll_ms.max(10)),
        gw,
        id,
        queue: first.into(),
        cursor: since,
        follow: q.follow.unwrap_or(true),
    };
    let stream = futures::stream::unfold(tail, |mut t| async move {
        loop {
            if let Some(item) = t.queue.pop_front() {
                t.cursor = item.seq;
                return Some((Ok(sse_event(&item)), t));
            }
            if !t.follow {
                return None;
            }
            tokio::time::sleep(t.poll).await;
            let (id, cursor) = (t.id.clone(), t.cursor);
            match blocking(&t.gw, move |g| g.events(&id, cursor)).await {
                Ok(items) => t.queue.extend(items),
                Err(_) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn registry(State(gw): Shared) -> Result<Json<serde_json::Value>, ApiError> {
    let reg: ApiRegistry = blocking(&gw, |g| Ok(g.planner().registry()?)).await?;
    Ok(Json(serde_json::from_str(&reg.to_json()).expect("registry json")))
}

#[derive(Debug, Default, Deserialize)]
struct EvalReq {
    /// `base`, `ext`, `all` or a corpus file path.
    #[serde(default)]
    corpus: Option<String>,
}

async fn eval_run(State(gw): Shared, body: Option<Json<EvalReq>>) -> Result<Json<EvalOutcome>, ApiError> {
    let corpus = body.and_then(|Json(r)| r.corpus).unwrap_or_else(|| "base".into());
    blocking(&gw, move |g| g.run_eval(&corpus)).await.map(Json)
}

async fn latest_report(State(gw): Shared) -> Result<Response, ApiError> {
    let report: Option<EvalReport> = blocking(&gw, |g| g.latest_report()).await?;
    Ok(match report {
        Some(r) => Json(r).into_response(),
        None => (StatusCode::NOT_FOUND, Json(json!({ "error": "no-report", "detail": "no evaluation has run yet" })))
            .into_response(),
    })
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/checkpoints/{plan}/{index}", post(decide))
        .route("/v1/sessions/{id}/events", get(events))
        .route("/v1/registry", get(registry))
        .route("/v1/eval/run", post(eval_run))
        .route("/v1/reports/latest", get(latest_report))
        .with_state(gw)
}

/// Background task feeding watchdog activity into every idle session.
pub fn spawn_poller(gw: Arc<Gateway>) -> tokio::task::JoinHandle<()> {
    let period = Duration::from_millis(gw.config().poll_ms.max(10));
    tokio::spawn(async move {
        loop {
            tokio::time::sleep(period).await;
            let g = gw.clone();
            let _ = tokio::task::spawn_blocking(move || g.pump_all()).await;
        }
    })
}
