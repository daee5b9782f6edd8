//! HTTP JSON service with isolated dialogue sessions.
//!
//! One immutable checkpoint is shared read-only by every session. Each
//! session holds its own transcript and accepts one message at a time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use acn_core::dialogue::{BeliefState, DialogueTurn, SystemAction};
use acn_core::infer::{respond, Reply, Stage, StageLimits};
use acn_core::kb::{Database, EntityRecord};
use acn_core::{AcnError, Model};
use acn_core::codec::Vocab;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

/// Produces one system turn from a transcript and a user utterance.
pub trait Responder: Send + Sync + 'static {
    fn respond(&self, history: &[DialogueTurn], user: &str) -> acn_core::Result<Reply>;
}

pub struct ModelResponder {
    pub model: Model,
    pub vocab: Vocab,
    pub db: Database,
    pub limits: StageLimits,
}

impl Responder for ModelResponder {
    fn respond(&self, history: &[DialogueTurn], user: &str) -> acn_core::Result<Reply> {
        respond(&self.model, &self.vocab, &self.db, history, user, &self.limits)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DbSummary {
    pub count: usize,
    pub records: Vec<EntityRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Diagnostics {
    pub tokens: Vec<String>,
    pub gate: Vec<f64>,
    pub copy_share: Vec<f64>,
}

/// Body of a successful message call, also one entry of the history.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TurnPayload {
    pub user: String,
    pub belief: BeliefState,
    pub db: DbSummary,
    pub action: SystemAction,
    pub response: String,
    pub diagnostics: Diagnostics,
}

impl TurnPayload {
    fn from_reply(user: &str, reply: &Reply) -> Self {
        let resp: Vec<_> = reply
            .diagnostics
            .iter()
            .filter(|d| d.stage == Stage::Response)
            .collect();
        Self {
            user: user.to_string(),
            belief: reply.belief.clone(),
            db: DbSummary {
                count: reply.db.total,
                records: reply.db.records.clone(),
            },
            action: reply.action.clone(),
            response: reply.response.clone(),
            diagnostics: Diagnostics {
                tokens: resp.iter().map(|d| d.text.clone()).collect(),
                gate: resp.iter().map(|d| d.gate).collect(),
                copy_share: resp.iter().map(|d| d.copy_share).collect(),
            },
        }
    }

    fn to_turn(&self) -> DialogueTurn {
        DialogueTurn {
            user: self.user.clone(),
            belief: self.belief.clone(),
            db: acn_core::kb::QueryResult {
                total: self.db.count,
                records: self.db.records.clone(),
            },
            action: self.action.clone(),
            system: self.response.clone(),
        }
    }
}

#[derive(Default)]
struct Session {
    busy: AtomicBool,
    turns: Mutex<Vec<TurnPayload>>,
}

/// Clears the busy flag when the in-flight message finishes, however it ends.
struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

pub struct AppState {
    responder: Arc<dyn Responder>,
    sessions: Mutex<HashMap<Uuid, Arc<Session>>>,
}

impl AppState {
    pub fn new(responder: impl Responder) -> Self {
        Self {
            responder: Arc::new(responder),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let id = Uuid::parse_str(id).map_err(|_| ApiError::not_found(id))?;
        self.sessions
            .lock()
            .expect("session map lock")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(&id.to_string()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }
}

impl From<AcnError> for ApiError {
    fn from(e: AcnError) -> Self {
        let status = match e {
            AcnError::BeliefParse { .. } | AcnError::Parse(_) | AcnError::MissingMarker { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            AcnError::SequenceTooLong { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageBody {
    text: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/:id", axum::routing::delete(delete_session))
        .route("/session/:id/message", post(post_message))
        .route("/session/:id/history", get(history))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn create_session(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let id = Uuid::new_v4();
    state
        .sessions
        .lock()
        .expect("session map lock")
        .insert(id, Arc::new(Session::default()));
    (StatusCode::CREATED, Json(json!({"session_id": id.to_string()})))
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let session = state.session(&id)?;
    state
        .sessions
        .lock()
        .expect("session map lock")
        .retain(|_, s| !Arc::ptr_eq(s, &session));
    Ok(StatusCode::NO_CONTENT)
}

async fn history(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.session(&id)?;
    let turns = session.turns.lock().expect("transcript lock").clone();
    Ok(Json(json!({"session_id": id, "turns": turns})))
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<MessageBody>, JsonRejection>,
) -> Result<Json<TurnPayload>, ApiError> {
    let session = state.session(&id)?;
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text()))?;
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", "text must not be empty"));
    }
    if session.busy.swap(true, Ordering::AcqRel) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "session_busy",
            "a message for this session is already being processed",
        ));
    }
    let guard = BusyGuard(session.clone());
    let history: Vec<DialogueTurn> = session
        .turns
        .lock()
        .expect("transcript lock")
        .iter()
        .map(TurnPayload::to_turn)
        .collect();
    let responder = state.responder.clone();
    // The transcript is appended before the busy flag clears, so the next
    // message always sees this turn.
    let payload = tokio::task::spawn_blocking(move || {
        let reply = responder.respond(&history, &text)?;
        let payload = TurnPayload::from_reply(&text, &reply);
        guard.0.turns.lock().expect("transcript lock").push(payload.clone());
        drop(guard);
        Ok::<_, AcnError>(payload)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(payload))
}

pub async fn serve(state: Arc<AppState>, host: &str, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
