//! HTTP dialogue service and shared CLI plumbing.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sktod_core::corpus::Domain;
use sktod_core::runtime::{Engine, PipelineConfig, SessionStore, StageSource};
use sktod_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const EXTERNAL: i32 = 3;
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_external() => exit::EXTERNAL,
        Some(Error::Config(_)) => exit::USAGE,
        Some(_) => exit::DATA,
        None => exit::USAGE,
    }
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub config: Arc<PipelineConfig>,
    pub sessions: Arc<SessionStore>,
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Precondition(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::Conflict(_) => StatusCode::CONFLICT,
            e if e.is_external() => StatusCode::BAD_GATEWAY,
            Error::Config(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_domain(s: &str) -> Result<Domain, ApiError> {
    Domain::parse(s).ok_or_else(|| Error::Precondition(format!("unknown domain {s:?}")).into())
}

#[derive(Deserialize, Default)]
struct NewSession {
    domain: Option<String>,
}

#[derive(Serialize)]
struct Created {
    session_id: String,
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req: NewSession = if body.iter().all(u8::is_ascii_whitespace) {
        NewSession::default()
    } else {
        serde_json::from_slice(&body).map_err(Error::from)?
    };
    let domain = req.domain.as_deref().map(parse_domain).transpose()?;
    let session_id = state.sessions.create(domain);
    Ok((StatusCode::CREATED, Json(Created { session_id })))
}

#[derive(Deserialize)]
struct UtteranceReq {
    text: String,
}

async fn utterance(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<sktod_core::runtime::TurnResult> {
    let req: UtteranceReq = serde_json::from_slice(&body).map_err(Error::from)?;
    // Stages are CPU-bound or make blocking HTTP calls.
    let turn = tokio::task::spawn_blocking(move || {
        state
            .sessions
            .handle_utterance(&state.engine, &state.config, &id, &req.text)
    })
    .await
    .map_err(|e| Error::Precondition(format!("turn aborted: {e}")))??;
    Ok(Json(turn))
}

async fn session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<sktod_core::runtime::SessionView> {
    Ok(Json(state.sessions.view(&id)?))
}

#[derive(Deserialize)]
struct EntityQuery {
    domain: Option<String>,
}

async fn entities(
    State(state): State<AppState>,
    Query(q): Query<EntityQuery>,
) -> ApiResult<Vec<sktod_core::runtime::EntityView>> {
    let domain = q.domain.as_deref().map(parse_domain).transpose()?;
    Ok(Json(
        state
            .engine
            .kb
            .entities()
            .iter()
            .filter(|e| domain.is_none_or(|d| e.domain == d))
            .map(|e| sktod_core::runtime::EntityView {
                domain: e.domain,
                entity_id: e.entity_id.clone(),
                name: e.name.clone(),
            })
            .collect(),
    ))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct StageStatus {
    pub source: StageSource,
    pub ready: bool,
}

/// Per-stage readiness for the configured sources.
pub fn stage_status(engine: &Engine, config: &PipelineConfig) -> serde_json::Map<String, serde_json::Value> {
    let external = |s: StageSource, client: bool| s != StageSource::External || client;
    let stages = [
        (
            "ktd",
            config.ktd,
            match config.ktd {
                StageSource::Native => engine.detector.is_some(),
                s => external(s, engine.scorer.is_some()),
            },
        ),
        ("et", config.et, config.et == StageSource::Native),
        (
            "ks",
            config.ks,
            engine.threshold(config).is_ok() && external(config.ks, engine.scorer.is_some()),
        ),
        (
            "rg",
            config.rg,
            external(config.rg, engine.generator.is_some()) && (!config.external_absa || engine.absa.is_some()),
        ),
    ];
    stages
        .into_iter()
        .map(|(name, source, ready)| {
            (
                name.to_string(),
                serde_json::to_value(StageStatus { source, ready }).unwrap(),
            )
        })
        .collect()
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    let stages = stage_status(&state.engine, &state.config);
    let ok = stages.values().all(|s| s["ready"] == true);
    Json(json!({
        "status": if ok { "ok" } else { "degraded" },
        "stages": stages,
        "sessions": state.sessions.len(),
    }))
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session))
        .route("/v1/sessions/{id}/utterance", post(utterance))
        .route("/v1/entities", get(entities))
        .route("/v1/health", get(health))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

pub async fn bind(addr: SocketAddr) -> anyhow::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))
}
