//! HTTP/JSON annotation service for live active-learning sessions.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::Html;
use axum::routing::{get, post};
use axum::{Json, Router};
use daes_core::al_loop::{Engine, PreparedData};
use daes_core::api::{LabelSubmission, Phase, QueryBatch, SessionCreated, SessionStatus, SubmissionSummary};
use daes_core::config::{parse_config, ConfigError, ExperimentConfig, OracleMode};
use tower_http::services::ServeDir;

pub mod error;
pub mod render;
pub mod session;

pub use error::ApiError;
use session::SessionHandle;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    /// Base for relative dataset directories in session configs.
    pub data_root: PathBuf,
    /// Sessions are checkpointed under `<dir>/<session id>/` when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Directory with a built UI bundle (`index.html`).
    pub static_dir: Option<PathBuf>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    settings: Settings,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    datasets: Mutex<HashMap<String, Arc<PreparedData>>>,
}

impl AppState {
    pub fn new(settings: Settings) -> Self {
        Self {
            inner: Arc::new(Inner {
                settings,
                sessions: RwLock::new(HashMap::new()),
                datasets: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn settings(&self) -> &Settings {
        &self.inner.settings
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.inner
            .sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn insert(&self, handle: SessionHandle) {
        self.inner
            .sessions
            .write()
            .expect("session map poisoned")
            .insert(handle.id.clone(), Arc::new(handle));
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.sessions.read().expect("session map poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Features for a config; raw datasets are shared between sessions.
    fn prepare(&self, config: &ExperimentConfig, seed: u64) -> Result<Arc<PreparedData>, ApiError> {
        let key = serde_json::to_string(&config.dataset).map_err(ApiError::internal)?;
        if config.ssl.is_none() {
            if let Some(hit) = self.inner.datasets.lock().expect("dataset cache poisoned").get(&key) {
                return Ok(hit.clone());
            }
        }
        let dataset = config
            .dataset
            .load(Some(&self.inner.settings.data_root))
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_config", e.to_string()))?;
        let prepared = Arc::new(PreparedData::prepare(dataset, config.ssl.as_ref(), seed)?);
        if config.ssl.is_none() {
            self.inner
                .datasets
                .lock()
                .expect("dataset cache poisoned")
                .insert(key, prepared.clone());
        }
        Ok(prepared)
    }

    /// Re-open every checkpointed session found in the checkpoint directory.
    pub async fn restore(&self) -> std::io::Result<usize> {
        let Some(root) = self.inner.settings.checkpoint_dir.clone() else {
            return Ok(0);
        };
        if !root.exists() {
            return Ok(0);
        }
        let mut restored = 0;
        for entry in std::fs::read_dir(&root)? {
            let dir = entry?.path();
            if !dir.join("engine.json").exists() {
                continue;
            }
            let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_owned();
            let state = self.clone();
            let path = dir.clone();
            let engine = tokio::task::spawn_blocking(move || -> Result<Engine, ApiError> {
                let (config, _) = Engine::peek_config(&path)?;
                let dataset = config
                    .dataset
                    .load(Some(&state.inner.settings.data_root))
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                Ok(Engine::resume(&path, dataset)?)
            })
            .await
            .expect("restore task panicked");
            match engine {
                Ok(engine) => {
                    tracing::info!(session = %id, "restored from checkpoint");
                    self.insert(SessionHandle::spawn(id, engine, Some(dir)));
                    restored += 1;
                }
                Err(e) => tracing::warn!(session = %id, "cannot restore: {}", e.message),
            }
        }
        Ok(restored)
    }
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::bad_body(e, None))?;
    let config = parse_config(text)?;
    if config.oracle != OracleMode::Live {
        return Err(ConfigError::Validation {
            field: "oracle".into(),
            message: "sessions need oracle = \"live\"".into(),
        }
        .into());
    }
    let seed = config.seeds.first().copied().unwrap_or(0);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let checkpoint = state.settings().checkpoint_dir.as_ref().map(|d| d.join(&id));
    let worker_state = state.clone();
    let engine = tokio::task::spawn_blocking(move || -> Result<Engine, ApiError> {
        let data = worker_state.prepare(&config, seed)?;
        Ok(Engine::new(config, data, seed)?)
    })
    .await
    .map_err(ApiError::internal)??;
    let handle = SessionHandle::spawn(id.clone(), engine, checkpoint);
    let status = handle.snapshot().status;
    state.insert(handle);
    tracing::info!(session = %id, "session created");
    Ok((StatusCode::CREATED, Json(SessionCreated { id, status })))
}

async fn get_batch(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<QueryBatch>, ApiError> {
    let snap = state.session(&id)?.snapshot();
    match (snap.status.phase, snap.batch) {
        (Phase::AwaitingLabels, Some(batch)) => Ok(Json((*batch).clone())),
        (Phase::Finished, _) => Err(ApiError::finished()),
        _ => Err(ApiError::training()),
    }
}

async fn submit_labels(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SubmissionSummary>, ApiError> {
    let session = state.session(&id)?;
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let submission: LabelSubmission =
        serde_path_to_error::deserialize(de).map_err(|e| ApiError::bad_body(e.inner(), Some(e.path().to_string())))?;
    Ok(Json(session.submit(submission).await?))
}

async fn get_status(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionStatus>, ApiError> {
    Ok(Json(state.session(&id)?.snapshot().status))
}

async fn placeholder() -> Html<&'static str> {
    Html("<!doctype html><title>daes</title><p>Annotation API at <code>/api/session</code>. No UI bundle is installed.</p>")
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/batch", get(get_batch))
        .route("/api/session/{id}/labels", post(submit_labels))
        .route("/api/session/{id}/status", get(get_status));
    let ui = state
        .settings()
        .static_dir
        .clone()
        .filter(|d| d.join("index.html").exists());
    let app = match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(placeholder)),
    };
    app.with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
