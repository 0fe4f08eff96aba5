//! HTTP service hosting incremental reconstruction sessions.
//!
//! A session owns one [`Reconstructor`]; fragments are integrated on the
//! blocking pool so the async runtime stays responsive while a level runs.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use uuid::Uuid;

use visrecon_core::api::{
    build_config, AblateRequest, ApiError, CreateSession, EvaluateRequest, ReferenceSpec, RunResponse, SessionInfo,
};
use visrecon_core::evaluation::{evaluate_mesh, Reference};
use visrecon_core::pipeline::{ablation_report, FragmentReport, Reconstructor};
use visrecon_core::surface::{parse_ply, ply_bytes};
use visrecon_core::synthscene::GroundTruthScene;
use visrecon_core::Error;

const BODY_LIMIT: usize = 1 << 30;

/// Error response: a status plus an [`ApiError`] body.
#[derive(Debug)]
pub struct Failure(StatusCode, ApiError);

impl Failure {
    fn not_found(what: impl Into<String>) -> Self {
        Failure(
            StatusCode::NOT_FOUND,
            ApiError {
                kind: "not_found".into(),
                field: None,
                message: what.into(),
            },
        )
    }

    fn internal(message: impl Into<String>) -> Self {
        Failure(
            StatusCode::INTERNAL_SERVER_ERROR,
            ApiError {
                kind: "internal".into(),
                field: None,
                message: message.into(),
            },
        )
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::EmptyResult(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Failure(status, ApiError::from(&e))
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type Reply<T> = Result<T, Failure>;

struct Session {
    rec: Reconstructor,
    /// Metrics JSON computed for the given number of integrated fragments.
    metrics: Option<(usize, Option<String>)>,
}

impl Session {
    fn info(&self, id: &Uuid) -> SessionInfo {
        SessionInfo {
            id: id.to_string(),
            fragments: self.rec.fragments().len(),
            integrated: self.rec.integrated(),
            done: self.rec.is_done(),
            config: self.rec.config().to_text(),
        }
    }
}

#[derive(Default)]
struct AppState {
    sessions: Mutex<HashMap<Uuid, Arc<Mutex<Session>>>>,
}

type Shared = Arc<AppState>;

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/fragments", get(fragment_reports))
        .route("/sessions/{id}/fragments/next", post(next_fragment))
        .route("/sessions/{id}/run", post(run_session))
        .route("/sessions/{id}/mesh", get(mesh))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/sessions/{id}/log", get(fragment_log))
        .route("/sessions/{id}/checkpoint", get(checkpoint))
        .route("/evaluate", post(evaluate))
        .route("/ablate", post(ablate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(Shared::default())
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, router()).with_graceful_shutdown(shutdown).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Reply<T> + Send + 'static) -> Reply<T> {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(Failure::internal(format!("worker failed: {e}"))))
}

fn session(state: &AppState, id: &str) -> Reply<(Uuid, Arc<Mutex<Session>>)> {
    let uuid = Uuid::parse_str(id).map_err(|_| Failure::not_found(format!("no session `{id}`")))?;
    let map = state.sessions.lock().expect("session table poisoned");
    map.get(&uuid)
        .cloned()
        .map(|s| (uuid, s))
        .ok_or_else(|| Failure::not_found(format!("no session `{id}`")))
}

fn lock(s: &Mutex<Session>) -> Reply<std::sync::MutexGuard<'_, Session>> {
    s.lock()
        .map_err(|_| Failure::internal("session state poisoned by an earlier failure"))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateSession>,
) -> Reply<(StatusCode, Json<SessionInfo>)> {
    let sess = blocking(move || {
        let cfg = build_config(&req.config, &req.overrides)?;
        let source = req.source.resolve()?;
        let mut rec = Reconstructor::new(cfg, &source)?;
        if let Some(dir) = req.dump_dir {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            rec.set_dump_dir(Some(dir));
        }
        Ok(Session { rec, metrics: None })
    })
    .await?;
    let id = Uuid::new_v4();
    let info = sess.info(&id);
    log::info!("session {id}: {} fragments", info.fragments);
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(sess)));
    Ok((StatusCode::CREATED, Json(info)))
}

async fn list_sessions(State(state): State<Shared>) -> Reply<Json<Vec<SessionInfo>>> {
    let all: Vec<_> = state
        .sessions
        .lock()
        .expect("session table poisoned")
        .iter()
        .map(|(id, s)| (*id, s.clone()))
        .collect();
    let mut out = Vec::with_capacity(all.len());
    for (id, s) in all {
        out.push(lock(&s)?.info(&id));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Json(out))
}

async fn session_info(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Json<SessionInfo>> {
    let (uuid, s) = session(&state, &id)?;
    let info = lock(&s)?.info(&uuid);
    Ok(Json(info))
}

async fn delete_session(State(state): State<Shared>, Path(id): Path<String>) -> Reply<StatusCode> {
    let (uuid, _) = session(&state, &id)?;
    state.sessions.lock().expect("session table poisoned").remove(&uuid);
    Ok(StatusCode::NO_CONTENT)
}

async fn fragment_reports(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Json<Vec<FragmentReport>>> {
    let (_, s) = session(&state, &id)?;
    let reports = lock(&s)?.rec.reports().to_vec();
    Ok(Json(reports))
}

async fn next_fragment(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Response> {
    let (_, s) = session(&state, &id)?;
    let report = blocking(move || {
        let mut g = lock(&s)?;
        Ok(g.rec.integrate_next()?.cloned())
    })
    .await?;
    Ok(match report {
        Some(r) => Json(r).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn run_session(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Json<RunResponse>> {
    let (uuid, s) = session(&state, &id)?;
    blocking(move || {
        let mut g = lock(&s)?;
        let start = g.rec.integrated();
        g.rec.run()?;
        Ok(Json(RunResponse {
            session: g.info(&uuid),
            reports: g.rec.reports()[start..].to_vec(),
        }))
    })
    .await
}

async fn mesh(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Response> {
    let (_, s) = session(&state, &id)?;
    let bytes = blocking(move || Ok(ply_bytes(&lock(&s)?.rec.extract_mesh()))).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn metrics(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Response> {
    let (_, s) = session(&state, &id)?;
    let json = blocking(move || {
        let mut g = lock(&s)?;
        let n = g.rec.integrated();
        if let Some((at, cached)) = &g.metrics {
            if *at == n {
                return Ok(cached.clone());
            }
        }
        let mesh = g.rec.extract_mesh();
        let m = if mesh.is_empty() { None } else { g.rec.metrics(&mesh)? };
        let json = m.map(|m| m.to_json());
        g.metrics = Some((n, json.clone()));
        Ok(json)
    })
    .await?;
    match json {
        Some(body) => Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response()),
        None => Err(Failure(
            StatusCode::NOT_FOUND,
            ApiError {
                kind: "no_metrics".into(),
                field: None,
                message: "the session has no reference scene or the mesh is empty".into(),
            },
        )),
    }
}

async fn fragment_log(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Response> {
    let (_, s) = session(&state, &id)?;
    let text = lock(&s)?.rec.log_text();
    Ok(([(header::CONTENT_TYPE, "text/tab-separated-values")], text).into_response())
}

async fn checkpoint(State(state): State<Shared>, Path(id): Path<String>) -> Reply<Response> {
    let (_, s) = session(&state, &id)?;
    let bytes = blocking(move || Ok(lock(&s)?.rec.checkpoint())).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

fn decode(what: &str, b64: &str) -> Reply<Vec<u8>> {
    base64::engine::general_purpose::STANDARD.decode(b64).map_err(|e| {
        Failure(
            StatusCode::BAD_REQUEST,
            ApiError {
                kind: "invalid_input".into(),
                field: Some(what.into()),
                message: format!("{what} is not valid base64: {e}"),
            },
        )
    })
}

async fn evaluate(Json(req): Json<EvaluateRequest>) -> Reply<Response> {
    let body = blocking(move || {
        let pred = parse_ply(&decode("pred", &req.pred)?)?;
        let reference = match &req.reference {
            ReferenceSpec::Ply(b64) => Reference::Mesh(parse_ply(&decode("reference", b64)?)?),
            ReferenceSpec::Scene(text) => Reference::Scene(GroundTruthScene::parse(text)?),
            ReferenceSpec::Builtin(name) => Reference::Scene(
                GroundTruthScene::builtin(name)
                    .ok_or_else(|| Error::InvalidInput(format!("no built-in scene `{name}`")))?,
            ),
        };
        let m = evaluate_mesh(
            &pred,
            &reference,
            req.threshold_cm,
            req.density,
            req.seed,
            req.cull_d_max,
        )?;
        Ok(m.to_json())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn ablate(Json(req): Json<AblateRequest>) -> Reply<Response> {
    let csv = blocking(move || {
        let source = req.source.resolve()?;
        let runs = req
            .runs
            .iter()
            .map(|r| build_config(&r.config, &[]).map(|c| (r.label.clone(), c)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ablation_report(&runs, &source)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}
