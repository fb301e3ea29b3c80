//! HTTP routes over a shared [`Engine`].

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use neurorag_core::engine::{read_labeled_queries, Engine, Mode, RetrieveRequest, TrainHyper, TrainReport};
use neurorag_core::features::SessionState;
use neurorag_core::types::ConfigOverrides;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replayed";
pub const OPENAPI: &str = include_str!("../openapi.json");
pub const PROVENANCE_SCHEMA: &str = include_str!("../schema/provenance.schema.json");

/// Error payload shared by the HTTP API and the command line:
/// `{"error": {"kind", "message", "path"?}}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
    /// Location of the offending field in a request body.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            kind: kind.to_string(),
            message: message.into(),
            path: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("not found: {}", what.into()))
    }

    fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            path: Some(path.into()),
            ..ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
        }
    }

    pub fn body(&self) -> Value {
        json!({ "error": self })
    }
}

impl From<&neurorag_core::Error> for ApiError {
    fn from(e: &neurorag_core::Error) -> Self {
        use neurorag_core::Error as E;
        let status = match e {
            E::Usage(_) => StatusCode::BAD_REQUEST,
            E::NotFound(_) => StatusCode::NOT_FOUND,
            E::Conflict(_) => StatusCode::CONFLICT,
            E::Data(_) | E::Dataset(_) | E::Json(_) | E::Io { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            E::Transport { .. } | E::Contract(_) => StatusCode::BAD_GATEWAY,
            E::Training { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl From<neurorag_core::Error> for ApiError {
    fn from(e: neurorag_core::Error) -> Self {
        ApiError::from(&e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, axum::Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Deserializes a request body, reporting the path of the first bad field.
pub fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let bytes: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) { b"{}" } else { bytes };
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let status = if inner.is_syntax() || inner.is_eof() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::UNPROCESSABLE_ENTITY
        };
        ApiError {
            status,
            path: (status == StatusCode::UNPROCESSABLE_ENTITY).then_some(path),
            ..ApiError::new(status, "validation", inner.to_string())
        }
    })?;
    de.end()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "validation", e.to_string()))?;
    Ok(value)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub job_id: String,
    pub status: JobStatus,
    pub triples_path: PathBuf,
    pub hyper: TrainHyper,
    /// Filled when the job finishes.
    pub loss_curve: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ApiError>,
}

struct Stored {
    body: Vec<u8>,
    status: StatusCode,
    response: Value,
}

pub struct AppState {
    engine: Arc<Engine>,
    training: TrainHyper,
    sessions: Mutex<HashMap<String, SessionState>>,
    jobs: Arc<Mutex<HashMap<String, Job>>>,
    idempotency: tokio::sync::Mutex<HashMap<(String, String), Stored>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, training: TrainHyper) -> Arc<Self> {
        Arc::new(AppState {
            engine,
            training,
            sessions: Mutex::new(HashMap::new()),
            jobs: Arc::new(Mutex::new(HashMap::new())),
            idempotency: tokio::sync::Mutex::new(HashMap::new()),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut SessionState) -> ApiResult<T>) -> ApiResult<T> {
        let mut sessions = self.sessions.lock().expect("session lock poisoned");
        let s = sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))?;
        f(s)
    }

    /// Runs a mutating handler once per client-supplied idempotency key.
    /// Retries with the same key and body replay the stored success; a
    /// different body under the same key is rejected.
    async fn idempotent<F, Fut>(&self, scope: String, headers: &HeaderMap, body: &[u8], run: F) -> Response
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = ApiResult<(StatusCode, Value)>>,
    {
        let key = match headers.get(IDEMPOTENCY_HEADER).map(|v| v.to_str()) {
            None => {
                return match run().await {
                    Ok((status, v)) => (status, axum::Json(v)).into_response(),
                    Err(e) => e.into_response(),
                }
            }
            Some(Ok(k)) if !k.is_empty() => k.to_string(),
            Some(_) => return ApiError::validation(IDEMPOTENCY_HEADER, "idempotency key must be visible ASCII").into_response(),
        };
        let mut store = self.idempotency.lock().await;
        let slot = (scope, key);
        if let Some(prev) = store.get(&slot) {
            if prev.body != body {
                return ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "idempotency",
                    "idempotency key was already used with a different request body",
                )
                .into_response();
            }
            let mut resp = (prev.status, axum::Json(prev.response.clone())).into_response();
            resp.headers_mut().insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
            return resp;
        }
        match run().await {
            Ok((status, v)) => {
                store.insert(
                    slot,
                    Stored {
                        body: body.to_vec(),
                        status,
                        response: v.clone(),
                    },
                );
                (status, axum::Json(v)).into_response()
            }
            Err(e) => e.into_response(),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/spec", get(spec))
        .route("/schema/provenance", get(provenance_schema))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(add_turn))
        .route("/sessions/{id}/questions", post(next_question))
        .route("/retrieve", post(retrieve))
        .route("/instruments", get(instruments))
        .route("/kg", get(kg))
        .route("/kg/paths", get(kg_paths))
        .route("/train", post(start_training))
        .route("/train/{job}", get(job_status))
        .fallback(|| async { ApiError::not_found("route") })
        .with_state(state)
}

fn to_value<T: Serialize>(v: &T) -> ApiResult<Value> {
    serde_json::to_value(v).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

fn json_text(raw: &'static str) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], raw).into_response()
}

async fn health(State(st): State<Arc<AppState>>) -> axum::Json<Value> {
    let snap = st.engine.snapshot();
    axum::Json(json!({
        "status": "ok",
        "documents": snap.corpus.len(),
        "model_checksum": snap.model.checksum(),
        "training": st.engine.is_training(),
        "sessions": st.sessions.lock().expect("session lock poisoned").len(),
    }))
}

async fn spec() -> Response {
    json_text(OPENAPI)
}

async fn provenance_schema() -> Response {
    json_text(PROVENANCE_SCHEMA)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {}

async fn create_session(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    st.idempotent("sessions".into(), &headers, &body, || async {
        let _: NewSession = parse_body(&body)?;
        let id = uuid::Uuid::new_v4().to_string();
        let session = SessionState::new(id.clone());
        let out = json!({ "session_id": id, "session": to_value(&session)? });
        st.sessions.lock().expect("session lock poisoned").insert(id, session);
        Ok((StatusCode::CREATED, out))
    })
    .await
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<axum::Json<Value>> {
    st.with_session(&id, |s| to_value(s)).map(axum::Json)
}

fn default_speaker() -> String {
    "patient".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnBody {
    #[serde(default = "default_speaker")]
    speaker: String,
    text: String,
}

async fn add_turn(State(st): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> Response {
    st.idempotent(format!("turns/{id}"), &headers, &body, || async {
        let t: TurnBody = parse_body(&body)?;
        if t.text.trim().is_empty() {
            return Err(ApiError::validation("text", "turn text must not be empty"));
        }
        st.with_session(&id, |s| {
            let update = st.engine.add_turn(s, &t.speaker, &t.text)?;
            Ok((StatusCode::OK, to_value(&update)?))
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionBody {
    instrument_id: String,
}

async fn next_question(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    st.idempotent(format!("questions/{id}"), &headers, &body, || async {
        let q: QuestionBody = parse_body(&body)?;
        st.with_session(&id, |s| {
            let next = st.engine.next_question(s, &q.instrument_id)?;
            Ok((StatusCode::OK, to_value(&next)?))
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveBody {
    pub session_id: Option<String>,
    pub text: Option<String>,
    pub mode: Option<Mode>,
    pub instrument_id: Option<String>,
    #[serde(default)]
    pub config: ConfigOverrides,
}

async fn retrieve(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let b: RetrieveBody = parse_body(&body)?;
    let session = match &b.session_id {
        Some(id) => Some(st.with_session(id, |s| Ok(s.clone()))?),
        None => None,
    };
    let req = RetrieveRequest {
        mode: b.mode,
        text: b.text,
        instrument_id: b.instrument_id,
        overrides: b.config,
    };
    let engine = st.engine.clone();
    let resp = tokio::task::spawn_blocking(move || engine.retrieve(&req, session.as_ref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let bytes = serde_json::to_vec(&resp)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn instruments(State(st): State<Arc<AppState>>) -> ApiResult<axum::Json<Value>> {
    to_value(&st.engine.instruments().instruments()).map(axum::Json)
}

async fn kg(State(st): State<Arc<AppState>>) -> axum::Json<Value> {
    let g = st.engine.kg();
    let nodes: Vec<Value> = g
        .nodes()
        .iter()
        .map(|n| json!({ "id": n.id, "label": n.label, "description": n.description }))
        .collect();
    axum::Json(json!({ "nodes": nodes, "edges": g.edges() }))
}

#[derive(Debug, Deserialize)]
struct PathQuery {
    from: String,
    to: String,
    #[serde(default = "default_path_limit")]
    limit: usize,
}

fn default_path_limit() -> usize {
    10
}

async fn kg_paths(State(st): State<Arc<AppState>>, Query(q): Query<PathQuery>) -> ApiResult<axum::Json<Value>> {
    let g = st.engine.kg();
    for id in [&q.from, &q.to] {
        if !g.contains(id) {
            return Err(ApiError::not_found(format!("node {id}")));
        }
    }
    if q.limit == 0 {
        return Err(ApiError::validation("limit", "limit must be positive"));
    }
    let paths = g.shortest_paths(&q.from, &q.to, q.limit)?;
    let hops = paths.first().map(|p| p.len() - 1);
    Ok(axum::Json(json!({ "from": q.from, "to": q.to, "hops": hops, "paths": paths })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainBody {
    triples_path: PathBuf,
    hyper: Option<TrainHyper>,
    #[serde(default)]
    config: ConfigOverrides,
}

async fn start_training(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    st.idempotent("train".into(), &headers, &body, || async {
        let b: TrainBody = parse_body(&body)?;
        let labeled = read_labeled_queries(&b.triples_path).map_err(|e| ApiError {
            path: Some("triples_path".into()),
            ..ApiError::from(e)
        })?;
        let hyper = b.hyper.unwrap_or(st.training);
        let lease = st.engine.begin_training()?;
        let job_id = uuid::Uuid::new_v4().to_string();
        let job = Job {
            job_id: job_id.clone(),
            status: JobStatus::Running,
            triples_path: b.triples_path,
            hyper,
            loss_curve: Vec::new(),
            report: None,
            error: None,
        };
        let out = to_value(&job)?;
        st.jobs.lock().expect("job lock poisoned").insert(job_id.clone(), job);
        let (engine, jobs) = (st.engine.clone(), st.jobs.clone());
        tokio::task::spawn_blocking(move || {
            let result = engine.train(&lease, &labeled, &hyper, &b.config);
            drop(lease);
            let mut jobs = jobs.lock().expect("job lock poisoned");
            let job = jobs.get_mut(&job_id).expect("job registered before spawn");
            match result {
                Ok(report) => {
                    tracing::info!(job = %job_id, final_loss = report.final_loss, "training finished");
                    job.status = JobStatus::Succeeded;
                    job.loss_curve = report.loss_curve.clone();
                    job.report = Some(report);
                }
                Err(e) => {
                    tracing::warn!(job = %job_id, error = %e, "training failed");
                    job.status = JobStatus::Failed;
                    job.error = Some(ApiError::from(e));
                }
            }
        });
        Ok((StatusCode::ACCEPTED, out))
    })
    .await
}

async fn job_status(State(st): State<Arc<AppState>>, Path(job): Path<String>) -> ApiResult<axum::Json<Value>> {
    let jobs = st.jobs.lock().expect("job lock poisoned");
    let j = jobs.get(&job).ok_or_else(|| ApiError::not_found(format!("training job {job}")))?;
    to_value(j).map(axum::Json)
}

/// Serves `router` until ctrl-c or SIGTERM, then drains in-flight requests.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
