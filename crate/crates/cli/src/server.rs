//! HTTP front of the reader study.
//!
//! | method | path                          | body                                   |
//! |--------|-------------------------------|----------------------------------------|
//! | POST   | `/api/sessions`               | `{reader_id, mode, seed?}`             |
//! | GET    | `/api/sessions/{id}/case`     | –                                      |
//! | POST   | `/api/sessions/{id}/answer`   | `{token, choice}`                      |
//! | GET    | `/api/summary`                | –                                      |
//!
//! Everything else is served from the UI directory when one is configured.
//! Case payloads carry only the token, progress and two PNG images; which
//! side is real never leaves the server.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;
use tripf_core::phantom::derive_seed;
use tripf_core::study::{summary_table, Choice, ReaderSummary, StudyMode, StudyService};

use crate::raster::png_base64;

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Mutex<Inner>>,
}

struct Inner {
    service: StudyService,
    seed: u64,
    sessions_created: u64,
}

impl AppState {
    /// `seed` drives the presentation order of sessions that do not bring
    /// their own seed.
    pub fn new(service: StudyService, seed: u64) -> Self {
        AppState {
            inner: Arc::new(Mutex::new(Inner {
                service,
                seed,
                sessions_created: 0,
            })),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub reader_id: String,
    pub mode: StudyMode,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub mode: StudyMode,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Base64 PNG, 16-bit grayscale.
    pub png: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CasePayload {
    Case {
        done: bool,
        token: String,
        mode: StudyMode,
        position: usize,
        total: usize,
        left: Image,
        right: Image,
    },
    Done {
        done: bool,
        summary: String,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Answer {
    pub token: String,
    pub choice: Choice,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Ack {
    pub accepted: bool,
    /// Number of cases answered so far.
    pub answered: usize,
}

#[derive(Debug, Serialize)]
pub struct SummaryPayload {
    pub readers: Vec<ReaderSummary>,
    pub table: String,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

fn internal(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
}

fn lock(state: &AppState) -> std::sync::MutexGuard<'_, Inner> {
    // A panic inside a handler cannot leave the service half-updated: the
    // log append happens before the cursor moves.
    state.inner.lock().unwrap_or_else(|e| e.into_inner())
}

async fn create_session(
    State(state): State<AppState>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let mut inner = lock(&state);
    inner.sessions_created += 1;
    let seed = req
        .seed
        .unwrap_or_else(|| derive_seed(inner.seed, inner.sessions_created));
    let s = inner
        .service
        .create_session(&req.reader_id, req.mode, seed)
        .map_err(bad_request)?;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: s.session_id.clone(),
            mode: s.mode,
            total: s.total(),
        }),
    ))
}

fn unknown_session(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown session {id:?}"))
}

async fn next_case(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<CasePayload>, ApiError> {
    let inner = lock(&state);
    let view = inner.service.next_case(&id).map_err(|_| unknown_session(&id))?;
    let Some(view) = view else {
        return Ok(Json(CasePayload::Done {
            done: true,
            summary: "/api/summary".into(),
        }));
    };
    let image = |r: &tripf_core::study::Raster| -> Result<Image, ApiError> {
        Ok(Image {
            width: r.width,
            height: r.height,
            png: png_base64(r).map_err(internal)?,
        })
    };
    Ok(Json(CasePayload::Case {
        done: false,
        token: view.token.to_string(),
        mode: view.mode,
        position: view.position,
        total: view.total,
        left: image(view.left)?,
        right: image(view.right)?,
    }))
}

async fn submit_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(ans): Json<Answer>,
) -> Result<Json<Ack>, ApiError> {
    let mut inner = lock(&state);
    let session = inner.service.session(&id).map_err(|_| unknown_session(&id))?;
    if ans.choice == Choice::Similar && session.mode == StudyMode::TwoCategory {
        return Err(bad_request("'similar' is not a valid choice in two-category mode"));
    }
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    match inner.service.submit(&id, &ans.token, ans.choice, now) {
        Ok(rec) => Ok(Json(Ack {
            accepted: true,
            answered: rec.position + 1,
        })),
        // Everything left at this point is a token that does not match the
        // current case: a replay, a stale page or a finished session.
        Err(tripf_core::Error::InvalidArgument(msg)) => Err(ApiError(StatusCode::CONFLICT, msg)),
        Err(e) => Err(internal(e)),
    }
}

async fn summary(State(state): State<AppState>) -> Result<Json<SummaryPayload>, ApiError> {
    let inner = lock(&state);
    let readers = inner.service.summary().map_err(internal)?;
    Ok(Json(SummaryPayload {
        table: summary_table(&readers),
        readers,
    }))
}

const NO_UI: &str = "<!doctype html><title>Reader study</title>\
<p>No UI bundle is configured for this server. The study API lives under <code>/api</code>.</p>";

/// The API routes plus static hosting of `ui_dir` (or a placeholder page).
pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/case", get(next_case))
        .route("/api/sessions/{id}/answer", post(submit_answer))
        .route("/api/summary", get(summary))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { Html(NO_UI) }),
    }
}

/// Serves until the future `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}
