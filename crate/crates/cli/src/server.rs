//! JSON chat service under `/api/v1`. Sessions live in memory; each has its
//! own lock so its messages are handled one at a time in arrival order,
//! while different sessions run concurrently over the shared weights.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use mmgpt_core::chat::{chat_turn, read_image_arg, ChatError, ChatModel, ChatSession};

use crate::commands::{decoding, TurnReply};

type Shared = Arc<Mutex<ChatSession>>;

pub struct AppState {
    engine: Arc<ChatModel>,
    sessions: std::sync::Mutex<HashMap<String, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(engine: ChatModel) -> Arc<Self> {
        Arc::new(Self {
            engine: Arc::new(engine),
            sessions: Default::default(),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .lock()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<ChatError> for ApiError {
    fn from(e: ChatError) -> Self {
        match e {
            ChatError::ContextOverflow { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "context_overflow", e.to_string()),
            ChatError::EmptyInstruction | ChatError::ImageLocked | ChatError::Image(_) => Self::bad_request(e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "code": self.code }))).into_response()
    }
}

// Bodies are parsed by hand so every malformed request is a plain 400,
// whatever its content type.
fn parse<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    image: Option<String>,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Message {
    text: Option<String>,
    temperature: Option<f64>,
    seed: Option<u64>,
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model": app.engine.model.cfg.summary() }))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<Created>, ApiError> {
    let req: CreateSession = parse(&body)?;
    let id = format!("s{:06}", app.next_id.fetch_add(1, Ordering::Relaxed));
    let mut session = ChatSession::new(id.clone());
    if let Some(arg) = req.image {
        let (r, img) = tokio::task::spawn_blocking(move || read_image_arg(&arg))
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
        session.attach_image(r, img)?;
    }
    app.sessions
        .lock()
        .expect("session map poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    log::info!("created session {id}");
    Ok(Json(Created { session_id: id }))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ChatSession>, ApiError> {
    let session = app.session(&id)?;
    let s = session.lock().await.clone();
    Ok(Json(s))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<TurnReply>, ApiError> {
    let session = app.session(&id)?;
    let req: Message = parse(&body)?;
    let text = req.text.ok_or_else(|| ApiError::bad_request("missing field `text`"))?;
    let mode = decoding(req.temperature, req.seed);
    let mut guard = session.lock_owned().await;
    let engine = app.engine.clone();
    let reply = tokio::task::spawn_blocking(move || {
        let response = chat_turn(&mut guard, &text, &engine, mode)?;
        Ok::<_, ChatError>(TurnReply {
            response,
            round_index: guard.history.len() - 1,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(reply))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/message", post(post_message))
        .with_state(state)
}

pub async fn serve(engine: ChatModel, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(engine))).await?;
    Ok(())
}
