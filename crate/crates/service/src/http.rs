//! HTTP API. Bodies are JSON; turn replies stream as server-sent events
//! named `delta`, `done` and `error`.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use living_novel::graph::DiegeticGraph;
use living_novel::ingest::ExtractionBundle;
use living_novel::Ordinal;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::service::{ChatService, HistoryPage, NovelInfo, TurnEvent, TurnRequest, DEFAULT_PAGE_SIZE};
use crate::session::Session;
use crate::ServiceError;

/// Uploads can carry a whole novel's bundle.
const UPLOAD_LIMIT: usize = 64 * 1024 * 1024;

type AppState = Arc<ChatService>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Busy(_) => StatusCode::CONFLICT,
            ServiceError::Generator(_) => StatusCode::BAD_GATEWAY,
            ServiceError::Retrieval(_) | ServiceError::Storage(_) | ServiceError::Internal(_) => {
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

pub fn router(service: Arc<ChatService>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/api/novels", post(upload_novel).get(list_novels))
        .route("/api/novels/{id}", get(novel_info))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/timeline", post(set_timeline))
        .route("/api/sessions/{id}/messages", post(post_message))
        .route("/api/sessions/{id}/history", get(history))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .with_state(service)
}

/// Bind `addr`, naming the address when it is taken.
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServiceError::Internal(format!("address {addr} is already in use")),
        _ => ServiceError::Internal(format!("cannot listen on {addr}: {e}")),
    })
}

pub async fn serve(listener: TcpListener, service: Arc<ChatService>) -> Result<(), ServiceError> {
    axum::serve(listener, router(service)).await.map_err(|e| ServiceError::Internal(e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_novels(State(svc): State<AppState>) -> Json<Value> {
    Json(json!({ "novel_ids": svc.novel_ids() }))
}

/// Accepts a graph, a bundle, or either wrapped as `{"graph": ..}` /
/// `{"bundle": ..}`.
async fn upload_novel(State(svc): State<AppState>, Json(body): Json<Value>) -> Result<Json<Value>, ServiceError> {
    let novel_id = blocking(move || {
        let (kind, value) = match body {
            Value::Object(mut m) if m.contains_key("graph") => ("graph", m.remove("graph").unwrap()),
            Value::Object(mut m) if m.contains_key("bundle") => ("bundle", m.remove("bundle").unwrap()),
            Value::Object(m) if m.contains_key("nodes") => ("graph", Value::Object(m)),
            other => ("bundle", other),
        };
        let text = value.to_string();
        if kind == "graph" {
            let graph = DiegeticGraph::from_json(&text).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            svc.add_graph(graph)
        } else {
            let bundle = ExtractionBundle::from_json(&text).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            svc.add_bundle(&bundle)
        }
    })
    .await?;
    Ok(Json(json!({ "novel_id": novel_id })))
}

async fn novel_info(State(svc): State<AppState>, Path(id): Path<String>) -> Result<Json<NovelInfo>, ServiceError> {
    Ok(Json(svc.novel_info(&id)?))
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    novel_id: String,
    characters: Vec<String>,
    #[serde(default)]
    t0: Ordinal,
}

async fn create_session(State(svc): State<AppState>, Json(req): Json<CreateSession>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(blocking(move || svc.create_session(&req.novel_id, &req.characters, req.t0)).await?))
}

async fn get_session(State(svc): State<AppState>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(svc.session(&id)?))
}

#[derive(Debug, Deserialize)]
struct SetTimeline {
    t: Ordinal,
}

async fn set_timeline(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SetTimeline>,
) -> Result<Json<Session>, ServiceError> {
    Ok(Json(blocking(move || svc.set_timeline(&id, req.t)).await?))
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    #[serde(default)]
    page: usize,
    page_size: Option<usize>,
}

async fn history(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PageQuery>,
) -> Result<Json<HistoryPage>, ServiceError> {
    Ok(Json(svc.history(&id, q.page, q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?))
}

fn sse_event(event: TurnEvent) -> Event {
    let (name, data) = match event {
        TurnEvent::Delta { character, text } => ("delta", json!({ "character": character, "text": text })),
        TurnEvent::Done { character, text, latency_ms, turn_index } => (
            "done",
            json!({ "character": character, "text": text, "latency_ms": latency_ms, "turn_index": turn_index }),
        ),
        TurnEvent::Error { message } => ("error", json!({ "message": message })),
    };
    Event::default().event(name).data(data.to_string())
}

async fn post_message(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    Json(mut req): Json<TurnRequest>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    req.session_id = id;
    let prepared = blocking(move || svc.prepare_turn(&req)).await?;
    let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
    tokio::task::spawn_blocking(move || {
        // a closed receiver only means the client went away
        let _ = prepared.run(&mut |e| {
            let _ = tx.send(e);
        });
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|e| (Ok(sse_event(e)), rx))
    });
    Ok(Sse::new(stream))
}
