//! The v1 HTTP API over [`SessionStore`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use refinpaint_core::engine::{Edit, EngineConfig};
use refinpaint_core::midi::{parse_smf, write_smf};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::session::{Models, SessionError, SessionState, SessionStore, StoredResponse};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
const MAX_UPLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    UnknownSession,
    NoFragmentSelected,
    InvalidEdit,
    MalformedBody,
    CorruptState,
    Internal,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 6] = [
        ErrorCode::UnknownSession,
        ErrorCode::NoFragmentSelected,
        ErrorCode::InvalidEdit,
        ErrorCode::MalformedBody,
        ErrorCode::CorruptState,
        ErrorCode::Internal,
    ];

    pub fn status(self) -> StatusCode {
        match self {
            ErrorCode::UnknownSession => StatusCode::NOT_FOUND,
            ErrorCode::NoFragmentSelected => StatusCode::CONFLICT,
            ErrorCode::InvalidEdit => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorCode::MalformedBody => StatusCode::BAD_REQUEST,
            ErrorCode::CorruptState | ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let code = match &e {
            SessionError::UnknownSession(_) => ErrorCode::UnknownSession,
            SessionError::NoFragmentSelected => ErrorCode::NoFragmentSelected,
            SessionError::InvalidEdit(_) => ErrorCode::InvalidEdit,
            SessionError::MalformedBody(_) => ErrorCode::MalformedBody,
            SessionError::CorruptState { .. } => ErrorCode::CorruptState,
            SessionError::Internal(_) => ErrorCode::Internal,
        };
        if e_is_server_side(code) {
            log::error!("{e}");
        }
        ApiError {
            code,
            message: e.to_string(),
        }
    }
}

fn e_is_server_side(code: ErrorCode) -> bool {
    matches!(code, ErrorCode::CorruptState | ErrorCode::Internal)
}

fn malformed(message: impl Into<String>) -> ApiError {
    ApiError {
        code: ErrorCode::MalformedBody,
        message: message.into(),
    }
}

impl ApiError {
    fn stored(&self) -> StoredResponse {
        StoredResponse {
            status: self.code.status().as_u16(),
            body: json!({ "code": self.code, "message": self.message }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        replay(self.stored())
    }
}

fn replay(r: StoredResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(r.body)).into_response()
}

pub struct AppState {
    pub models: Arc<Models>,
    pub engine: EngineConfig,
    pub store: SessionStore,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    create_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(models: Models, engine: EngineConfig, store: SessionStore) -> Self {
        Self {
            models: Arc::new(models),
            engine,
            store,
            locks: Mutex::new(HashMap::new()),
            create_lock: tokio::sync::Mutex::new(()),
        }
    }

    fn lock_for(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.locks.lock().expect("lock table");
        locks.entry(id.to_string()).or_default().clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/fragment", post(select_fragment))
        .route("/v1/sessions/{id}/iterate", post(iterate))
        .route("/v1/sessions/{id}/accept", post(accept))
        .route("/v1/sessions/{id}/export", get(export))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

fn idempotency_key(headers: &HeaderMap) -> Option<String> {
    headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| malformed(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        code: ErrorCode::Internal,
        message: e.to_string(),
    })
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    headers: HeaderMap,
    mut multipart: Multipart,
) -> Response {
    let key = idempotency_key(&headers);
    let _guard = app.create_lock.lock().await;
    if let Some(stored) = key.as_deref().and_then(|k| app.store.global_response(k)) {
        return replay(stored);
    }
    let mut file: Option<Vec<u8>> = None;
    let mut seed = app.engine.seed;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return malformed(e.to_string()).into_response(),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => return malformed(e.to_string()).into_response(),
        };
        match name.as_str() {
            "seed" => match std::str::from_utf8(&bytes).ok().and_then(|s| s.trim().parse().ok()) {
                Some(s) => seed = s,
                None => return malformed("seed must be an unsigned integer").into_response(),
            },
            _ if file.is_none() => file = Some(bytes.to_vec()),
            _ => return malformed(format!("unexpected field {name:?}")).into_response(),
        }
    }
    let Some(bytes) = file else {
        return malformed("expected a MIDI file part").into_response();
    };
    let app2 = app.clone();
    let result = blocking(move || -> Result<StoredResponse, ApiError> {
        let score = parse_smf(&bytes).map_err(|e| malformed(format!("not a readable MIDI file: {e}")))?;
        let state = SessionState::new(SessionStore::new_id(), &score, seed);
        app2.store.create(&state, &bytes)?;
        log::info!("created session {}", state.session_id);
        Ok(StoredResponse {
            status: StatusCode::CREATED.as_u16(),
            body: json!({
                "session_id": state.session_id,
                "n_bars": state.n_bars(),
                "bars": state.bars(),
            }),
        })
    })
    .await;
    let stored = match result {
        Ok(Ok(r)) => r,
        Ok(Err(e)) | Err(e) => e.stored(),
    };
    if let Some(k) = key {
        if stored.status < 500 {
            if let Err(e) = app.store.store_global_response(&k, &stored) {
                return ApiError::from(e).into_response();
            }
        }
    }
    replay(stored)
}

/// Runs `op` on the loaded session under its lock, saving the state and
/// recording the response under the request's Idempotency-Key.
async fn mutate<F>(app: Arc<AppState>, id: String, headers: &HeaderMap, op: F) -> Response
where
    F: FnOnce(&AppState, &mut SessionState) -> Result<StoredResponse, ApiError> + Send + 'static,
{
    let key = idempotency_key(headers);
    let lock = app.lock_for(&id);
    let _guard = lock.lock().await;
    let result = blocking(move || -> Result<StoredResponse, ApiError> {
        let mut state = app.store.load(&id)?;
        if let Some(stored) = key.as_deref().and_then(|k| state.idempotency.get(k)) {
            return Ok(stored.clone());
        }
        let before = state.clone();
        let response = match op(&app, &mut state) {
            Ok(r) => r,
            Err(e) if e_is_server_side(e.code) => return Err(e),
            Err(e) => {
                state = before.clone();
                e.stored()
            }
        };
        if let Some(k) = key {
            state.idempotency.insert(k, response.clone());
        }
        if state != before {
            app.store.save(&state)?;
        }
        Ok(response)
    })
    .await;
    match result {
        Ok(Ok(r)) => replay(r),
        Ok(Err(e)) | Err(e) => e.into_response(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FragmentRequest {
    bar_from: usize,
    bar_to: usize,
}

async fn select_fragment(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: FragmentRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    mutate(app, id, &headers, move |app, state| {
        let f = state.select_fragment(req.bar_from, req.bar_to, app.models.max_len())?;
        Ok(StoredResponse {
            status: 200,
            body: json!({
                "fragment_token_range": [f.token_start, f.token_end],
                "n_tokens": f.n_tokens(),
            }),
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IterateRequest {
    #[serde(default)]
    edits: Vec<Edit>,
    keep_count: Option<usize>,
    temperature: Option<f64>,
}

async fn iterate(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let req: IterateRequest = if body.is_empty() {
        IterateRequest {
            edits: Vec::new(),
            keep_count: None,
            temperature: None,
        }
    } else {
        match parse_body(&body) {
            Ok(r) => r,
            Err(e) => return e.into_response(),
        }
    };
    mutate(app, id, &headers, move |app, state| {
        let mut edits = Vec::with_capacity(req.edits.len() + 1);
        if let Some(k) = req.keep_count {
            edits.push(Edit::SetKeepCount { k });
        }
        edits.extend(req.edits);
        let index = state
            .iterate(&app.models.inpainter, &app.models.feedback, &app.engine, &edits, req.temperature)?
            .index;
        let view = state.iteration_view(index);
        app.store.write_trace(&state.session_id, &view)?;
        let body = serde_json::to_value(&view).map_err(|e| ApiError {
            code: ErrorCode::Internal,
            message: e.to_string(),
        })?;
        Ok(StoredResponse { status: 200, body })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptRequest {
    iteration_index: usize,
}

async fn accept(State(app): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    let req: AcceptRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    mutate(app, id, &headers, move |_, state| {
        state.accept(req.iteration_index)?;
        Ok(StoredResponse {
            status: 200,
            body: json!({ "accepted_index": req.iteration_index }),
        })
    })
    .await
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let result = blocking(move || -> Result<Value, ApiError> {
        let state = app.store.load(&id)?;
        serde_json::to_value(state.summary()).map_err(|e| ApiError {
            code: ErrorCode::Internal,
            message: e.to_string(),
        })
    })
    .await;
    match result {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) | Err(e) => e.into_response(),
    }
}

async fn export(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let result = blocking(move || -> Result<Vec<u8>, ApiError> {
        let state = app.store.load(&id)?;
        Ok(write_smf(&state.export_score()))
    })
    .await;
    match result {
        Ok(Ok(bytes)) => ([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response(),
        Ok(Err(e)) | Err(e) => e.into_response(),
    }
}
