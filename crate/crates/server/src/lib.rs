//! HTTP/JSON service over the narravo engine. Sessions are event-sourced:
//! each accepted event is appended to the session's JSONL log and fsynced
//! before the response is sent, and a restarted service replays the logs.

mod error;
mod store;

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use narravo_core::anchor::{match_names, DEFAULT_MATCH_THRESHOLD};
use narravo_core::api::{
    ratings_report_inputs, BatchRequest, CreateScript, CreateSession, GenerateScript, Health,
    RatingsAccepted, SceneSummary, ScriptRecord, ScriptSource, ScriptSummary, SessionHandle,
    UploadScript, ValidateRequest, ValidateResponse,
};
use narravo_core::engine::{start_session, EventOutcome, PendingTrigger, SessionEvent, SessionState, TraversalLog};
use narravo_core::gateway::{template_hash, BackendConfig, GenerationRequest};
use narravo_core::metrics::{build_report, MetricReport, RatingSample, ReportInputs};
use narravo_core::pipeline::{evaluate_files, generate_bundle, BatchOutcome};
use narravo_core::scene::{load_scene, SceneSnapshot};
use narravo_core::schema::{link_story_tree, parse_script, serialize_script, validate_script};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Mutex, RwLock};
use tokio::task::JoinHandle;

pub use error::ApiError;
use error::ApiResult;
use store::{EventLog, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default)]
    pub port: u16,
    /// Persistence root; without one the service keeps everything in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Backend used by `POST /scripts` requests that do not name their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
    #[serde(default = "default_threshold")]
    pub anchor_threshold: f64,
    #[serde(default = "default_max_fragments")]
    pub max_fragments: usize,
    #[serde(default = "default_key_objects")]
    pub key_objects: usize,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_threshold() -> f64 {
    DEFAULT_MATCH_THRESHOLD
}

fn default_max_fragments() -> usize {
    13
}

fn default_key_objects() -> usize {
    3
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: default_host(),
            port: 0,
            data_dir: None,
            backend: None,
            anchor_threshold: default_threshold(),
            max_fragments: default_max_fragments(),
            key_objects: default_key_objects(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data directory: {0}")]
    Store(#[from] std::io::Error),
    #[error("recovering session {id}: {message}")]
    Recovery { id: String, message: String },
}

impl ServerConfig {
    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let err = |message: String| ServerError::Config {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cfg: ServerConfig = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut cfg.data_dir {
            join(d);
        }
        match &mut cfg.backend {
            Some(BackendConfig::Replay(r)) => join(&mut r.fixture_dir),
            Some(BackendConfig::Live(l)) => {
                if let Some(d) = &mut l.record_dir {
                    join(d)
                }
            }
            None => {}
        }
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ServerError> {
        if !(0.0..=1.0).contains(&self.anchor_threshold) {
            return Err(ServerError::Invalid(format!(
                "anchor_threshold must lie in [0, 1], got {}",
                self.anchor_threshold
            )));
        }
        if let Some(b) = &self.backend {
            b.check().map_err(ServerError::Invalid)?;
        }
        Ok(())
    }
}

struct Session {
    handle: SessionHandle,
    state: SessionState,
    log: Option<EventLog>,
}

struct AppState {
    config: ServerConfig,
    store: Option<Store>,
    scenes: RwLock<HashMap<String, SceneSnapshot>>,
    scripts: RwLock<HashMap<String, Arc<ScriptRecord>>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    ratings: Mutex<Vec<RatingSample>>,
}

type Shared = Arc<AppState>;

fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn io_err(e: std::io::Error) -> ApiError {
    ApiError::internal(format!("persistence failed: {e}"))
}

async fn build_state(config: ServerConfig) -> Result<Shared, ServerError> {
    config.check()?;
    let store = match &config.data_dir {
        Some(d) => Some(Store::open(d).await?),
        None => None,
    };
    let state = AppState {
        config,
        store,
        scenes: RwLock::default(),
        scripts: RwLock::default(),
        sessions: RwLock::default(),
        ratings: Mutex::default(),
    };
    if let Some(store) = &state.store {
        let rec = store.recover().await?;
        *state.scenes.write().await = rec.scenes;
        *state.scripts.write().await = rec
            .scripts
            .into_iter()
            .map(|(k, v)| (k, Arc::new(v)))
            .collect();
        *state.ratings.lock().await = rec.ratings;
        let scripts = state.scripts.read().await;
        let mut sessions = state.sessions.write().await;
        for (handle, events) in rec.sessions {
            let fail = |message: String| ServerError::Recovery {
                id: handle.id.clone(),
                message,
            };
            let record = scripts
                .get(&handle.script_id)
                .ok_or_else(|| fail(format!("script {} missing", handle.script_id)))?;
            let mut session = start_session(record.tree.clone(), record.anchors.clone())
                .map_err(|e| fail(e.to_string()))?;
            for ev in events {
                session.handle_event(ev).map_err(|e| fail(e.to_string()))?;
            }
            let log = store.event_log(&handle.id).await?;
            tracing::info!(
                "recovered session {} ({} events)",
                handle.id,
                session.log.len()
            );
            sessions.insert(
                handle.id.clone(),
                Arc::new(Mutex::new(Session {
                    handle,
                    state: session,
                    log: Some(log),
                })),
            );
        }
    }
    Ok(Arc::new(state))
}

fn app_router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scenes", post(create_scene).get(list_scenes))
        .route("/scenes/{id}", get(get_scene))
        .route("/scripts", post(create_script).get(list_scripts))
        .route("/scripts/validate", post(validate))
        .route("/scripts/{id}", get(get_script))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", post(post_event))
        .route("/sessions/{id}/state", get(session_state))
        .route("/sessions/{id}/triggers", get(session_triggers))
        .route("/sessions/{id}/log", get(session_log))
        .route("/metrics/report", post(metrics_report).get(stored_report))
        .route("/metrics/ratings", post(add_ratings).get(list_ratings))
        .route("/metrics/batch", post(metrics_batch))
        .with_state(state)
}

/// Router over a fresh state (recovering from `data_dir` when set).
pub async fn router(config: ServerConfig) -> Result<Router, ServerError> {
    Ok(app_router(build_state(config).await?))
}

/// Serves until `shutdown` resolves, then drains in-flight requests.
pub async fn serve(
    listener: TcpListener,
    config: ServerConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServerError> {
    let app = router(config).await?;
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(ServerError::Store)
}

/// A service running on a background task.
pub struct RunningServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<Result<(), ServerError>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn stop(mut self) -> Result<(), ServerError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await.expect("server task panicked")
    }
}

/// Binds `config.host:config.port` (port 0 picks a free one) and serves in
/// the background.
pub async fn spawn(config: ServerConfig) -> Result<RunningServer, ServerError> {
    let addr = format!("{}:{}", config.host, config.port);
    let listener = TcpListener::bind(&addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    let local = listener.local_addr().map_err(ServerError::Store)?;
    let app = router(config).await?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
            .map_err(ServerError::Store)
    });
    Ok(RunningServer {
        addr: local,
        shutdown: Some(tx),
        task,
    })
}

/// JSON body; the error names the failing position.
fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        template_hash: template_hash(),
    })
}

async fn create_scene(State(app): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let scene = load_scene(text).map_err(|e| ApiError::unprocessable("invalid_scene", e.to_string()))?;
    if let Some(store) = &app.store {
        store.save_scene(&scene).await.map_err(io_err)?;
    }
    app.scenes
        .write()
        .await
        .insert(scene.scene_id.clone(), scene.clone());
    Ok((StatusCode::CREATED, Json(scene)).into_response())
}

async fn list_scenes(State(app): State<Shared>) -> Json<Vec<SceneSummary>> {
    let scenes = app.scenes.read().await;
    let mut out: Vec<SceneSummary> = scenes
        .values()
        .map(|s| SceneSummary {
            scene_id: s.scene_id.clone(),
            objects: s.objects.len(),
        })
        .collect();
    out.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Json(out)
}

async fn get_scene(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SceneSnapshot>> {
    app.scenes
        .read()
        .await
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found("scene", &id))
}

async fn scene(app: &AppState, id: &str) -> ApiResult<SceneSnapshot> {
    app.scenes
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("scene", id))
}

async fn store_script(app: &AppState, record: ScriptRecord) -> ApiResult<Response> {
    if let Some(store) = &app.store {
        store.save_script(&record).await.map_err(io_err)?;
    }
    app.scripts
        .write()
        .await
        .insert(record.id.clone(), Arc::new(record.clone()));
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn create_script(State(app): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: CreateScript = {
        let v: serde_json::Value = parse_json(&body)?;
        let upload = v.get("script").is_some();
        let parsed = if upload {
            serde_json::from_value::<UploadScript>(v).map(CreateScript::Upload)
        } else {
            serde_json::from_value::<GenerateScript>(v).map(CreateScript::Generate)
        };
        parsed.map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))?
    };
    match req {
        CreateScript::Upload(up) => upload_script(&app, up).await,
        CreateScript::Generate(gen) => generate(&app, gen).await,
    }
}

async fn upload_script(app: &AppState, up: UploadScript) -> ApiResult<Response> {
    let scene = scene(app, &up.scene_id).await?;
    let validation = validate_script(&up.script);
    if validation.has_errors() {
        return Err(ApiError::unprocessable("invalid_script", "script has validation errors")
            .with_details(serde_json::to_value(&validation).expect("report serializes")));
    }
    let tree = link_story_tree(&up.script)
        .map_err(|e| ApiError::unprocessable("invalid_script", e.to_string()))?;
    let names: Vec<String> = up.script.objects.iter().map(|o| o.name.clone()).collect();
    let anchors = match_names(&names, &scene, app.config.anchor_threshold);
    let record = ScriptRecord {
        id: uuid::Uuid::new_v4().to_string(),
        scene_id: up.scene_id,
        source: ScriptSource::Uploaded,
        strategy: None,
        script_digest: sha256_hex(&serialize_script(&up.script)),
        script: up.script,
        validation,
        tree,
        anchors,
        provenance: None,
        generation: None,
    };
    store_script(app, record).await
}

async fn generate(app: &AppState, gen: GenerateScript) -> ApiResult<Response> {
    let scene = scene(app, &gen.scene_id).await?;
    let backend = gen
        .backend
        .clone()
        .or_else(|| app.config.backend.clone())
        .ok_or_else(|| ApiError::bad_request("no backend configured and none given in the request"))?;
    backend.check().map_err(ApiError::bad_request)?;
    let request = GenerationRequest {
        scene,
        strategy: gen.strategy,
        max_fragments: gen.max_fragments.unwrap_or(app.config.max_fragments),
        key_objects: gen.key_objects.unwrap_or(app.config.key_objects),
        seed: gen.seed.clone().unwrap_or_default(),
        image_refs: Vec::new(),
    };
    let threshold = app.config.anchor_threshold;
    let result = tokio::task::spawn_blocking(move || {
        let backend = backend.into_backend();
        generate_bundle(&request, backend.as_ref(), threshold)
    })
    .await
    .map_err(|e| ApiError::internal(format!("generation task failed: {e}")))?;
    let bundle = result.map_err(|e| {
        ApiError::unprocessable("generation_failed", e.to_string())
            .with_details(serde_json::to_value(&e).expect("error serializes"))
    })?;
    let record = ScriptRecord {
        id: uuid::Uuid::new_v4().to_string(),
        scene_id: gen.scene_id,
        source: ScriptSource::Generated,
        strategy: Some(gen.strategy),
        script_digest: sha256_hex(&serialize_script(&bundle.script)),
        script: bundle.script,
        validation: bundle.validation,
        tree: bundle.tree,
        anchors: bundle.anchors,
        provenance: Some(bundle.provenance),
        generation: Some(bundle.generation),
    };
    store_script(app, record).await
}

#[derive(Debug, Deserialize)]
struct ScriptFilter {
    scene_id: Option<String>,
}

async fn list_scripts(State(app): State<Shared>, Query(f): Query<ScriptFilter>) -> Json<Vec<ScriptSummary>> {
    let scripts = app.scripts.read().await;
    let mut out: Vec<ScriptSummary> = scripts
        .values()
        .filter(|r| f.scene_id.as_ref().is_none_or(|s| *s == r.scene_id))
        .map(|r| r.summary())
        .collect();
    out.sort_by(|a, b| (&a.scene_id, a.strategy.map(|s| s.tag()), &a.id).cmp(&(&b.scene_id, b.strategy.map(|s| s.tag()), &b.id)));
    Json(out)
}

async fn get_script(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<ScriptRecord>> {
    app.scripts
        .read()
        .await
        .get(&id)
        .map(|r| Json((**r).clone()))
        .ok_or_else(|| ApiError::not_found("script", &id))
}

async fn validate(body: Bytes) -> ApiResult<Json<ValidateResponse>> {
    let req: ValidateRequest = parse_json(&body)?;
    Ok(Json(match parse_script(&req.document) {
        Ok(script) => ValidateResponse {
            parse_error: None,
            report: Some(validate_script(&script)),
        },
        Err(e) => ValidateResponse {
            parse_error: Some(e.to_string()),
            report: None,
        },
    }))
}

async fn create_session(State(app): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_json(&body)?;
    let record = app
        .scripts
        .read()
        .await
        .get(&req.script_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("script", &req.script_id))?;
    let state = start_session(record.tree.clone(), record.anchors.clone())
        .map_err(|e| ApiError::unprocessable("cannot_start", e.to_string()))?;
    let handle = SessionHandle {
        id: uuid::Uuid::new_v4().to_string(),
        created: now(),
        script_id: record.id.clone(),
        script_digest: record.script_digest.clone(),
    };
    let log = match &app.store {
        Some(store) => Some(store.create_session(&handle).await.map_err(io_err)?),
        None => None,
    };
    app.sessions.write().await.insert(
        handle.id.clone(),
        Arc::new(Mutex::new(Session {
            handle: handle.clone(),
            state,
            log,
        })),
    );
    Ok((StatusCode::CREATED, Json(handle)).into_response())
}

async fn session(app: &AppState, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
    app.sessions
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found("session", id))
}

async fn list_sessions(State(app): State<Shared>) -> Json<Vec<SessionHandle>> {
    let sessions: Vec<Arc<Mutex<Session>>> = app.sessions.read().await.values().cloned().collect();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        out.push(s.lock().await.handle.clone());
    }
    out.sort_by(|a, b| a.created.total_cmp(&b.created).then(a.id.cmp(&b.id)));
    Json(out)
}

async fn get_session(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionHandle>> {
    let s = session(&app, &id).await?;
    let handle = s.lock().await.handle.clone();
    Ok(Json(handle))
}

async fn post_event(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<EventOutcome>> {
    let s = session(&app, &id).await?;
    let event: SessionEvent = parse_json(&body)?;
    // one writer per session: the lock spans check, persist and apply
    let mut guard = s.lock().await;
    guard
        .state
        .accepts(&event)
        .map_err(|e| ApiError::unprocessable("invalid_event", e.to_string()))?;
    if let Some(log) = guard.log.as_mut() {
        log.append(&event).await.map_err(io_err)?;
    }
    let outcome = guard
        .state
        .handle_event(event)
        .map_err(|e| ApiError::internal(format!("accepted event failed to apply: {e}")))?;
    Ok(Json(outcome))
}

async fn session_state(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionState>> {
    let s = session(&app, &id).await?;
    let state = s.lock().await.state.clone();
    Ok(Json(state))
}

async fn session_triggers(
    State(app): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Vec<PendingTrigger>>> {
    let s = session(&app, &id).await?;
    let triggers = s.lock().await.state.available_triggers();
    Ok(Json(triggers))
}

async fn session_log(State(app): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<TraversalLog>> {
    let s = session(&app, &id).await?;
    let log = s.lock().await.state.export_log();
    Ok(Json(log))
}

#[derive(Debug, Deserialize)]
struct ReportFormat {
    format: Option<String>,
}

fn render(report: MetricReport, format: &ReportFormat) -> ApiResult<Response> {
    match format.format.as_deref() {
        None | Some("json") => Ok(Json(report).into_response()),
        Some("text") => Ok((
            [(header::CONTENT_TYPE, "text/plain; charset=utf-8")],
            report.render_text(),
        )
            .into_response()),
        Some(other) => Err(ApiError::bad_request(format!(
            "unknown format `{other}` (expected json or text)"
        ))),
    }
}

async fn compute_report(inputs: ReportInputs) -> ApiResult<MetricReport> {
    tokio::task::spawn_blocking(move || build_report(&inputs))
        .await
        .map_err(|e| ApiError::internal(format!("metric task failed: {e}")))?
        .map_err(|e| ApiError::unprocessable("invalid_metric_input", e.to_string()))
}

async fn metrics_report(Query(format): Query<ReportFormat>, body: Bytes) -> ApiResult<Response> {
    let inputs: ReportInputs = parse_json(&body)?;
    render(compute_report(inputs).await?, &format)
}

async fn stored_report(State(app): State<Shared>, Query(format): Query<ReportFormat>) -> ApiResult<Response> {
    let inputs = ratings_report_inputs(&app.ratings.lock().await);
    render(compute_report(inputs).await?, &format)
}

async fn add_ratings(State(app): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let samples: Vec<RatingSample> = parse_json(&body)?;
    for s in &samples {
        s.check()
            .map_err(|e| ApiError::unprocessable("invalid_rating", e.to_string()))?;
    }
    let mut ratings = app.ratings.lock().await;
    if let Some(store) = &app.store {
        store.append_ratings(&samples).await.map_err(io_err)?;
    }
    ratings.extend(samples.iter().cloned());
    let body = RatingsAccepted {
        accepted: samples.len(),
        stored: ratings.len(),
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn list_ratings(State(app): State<Shared>) -> Json<Vec<RatingSample>> {
    Json(app.ratings.lock().await.clone())
}

async fn metrics_batch(body: Bytes) -> ApiResult<Json<BatchOutcome>> {
    let req: BatchRequest = parse_json(&body)?;
    let outcome = tokio::task::spawn_blocking(move || evaluate_files(&req.files))
        .await
        .map_err(|e| ApiError::internal(format!("metric task failed: {e}")))?
        .map_err(|e| ApiError::unprocessable("no_inputs", e.to_string()))?;
    Ok(Json(outcome))
}
