//! HTTP backend for the interactive editor.
//!
//! Everything lives under `/api/v1`. A session holds façades and the
//! clusters the user groups their windows into; each cluster owns one
//! grammar and one mesh shared by all its members. Revisions travel in
//! `ETag` and are checked against `If-Match` on grammar edits.

mod error;
mod session;

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fenestra_core::grammar::WindowType;
use fenestra_core::inference::{grouped_inference, Recognizer, WindowPrediction};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use session::{Cluster, ClusterView, Facade, Session, Snapshot};

const TOP_K: usize = 3;

/// Shared server state. Cheap to clone.
#[derive(Clone, Default)]
pub struct AppState {
    session: Arc<RwLock<Option<Session>>>,
    model: Arc<RwLock<Option<Arc<Recognizer>>>>,
    snapshot_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_session(self, session: Session) -> Self {
        *self.session.write().expect("session lock") = Some(session);
        self
    }

    pub fn with_model(self, model: Recognizer) -> Self {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
        self
    }

    pub fn with_snapshot_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.snapshot_dir = Some(dir.into());
        self
    }

    fn read(&self) -> Result<SessionRead<'_>, ApiError> {
        let guard = self.session.read().map_err(|_| ApiError::Internal("session lock poisoned".into()))?;
        if guard.is_none() {
            return Err(ApiError::NoSession);
        }
        Ok(SessionRead(guard))
    }

    fn write(&self) -> Result<SessionWrite<'_>, ApiError> {
        let guard = self.session.write().map_err(|_| ApiError::Internal("session lock poisoned".into()))?;
        if guard.is_none() {
            return Err(ApiError::NoSession);
        }
        Ok(SessionWrite(guard))
    }

    fn model(&self) -> Result<Arc<Recognizer>, ApiError> {
        self.model
            .read()
            .map_err(|_| ApiError::Internal("model lock poisoned".into()))?
            .clone()
            .ok_or(ApiError::NoModel)
    }
}

struct SessionRead<'a>(RwLockReadGuard<'a, Option<Session>>);

impl std::ops::Deref for SessionRead<'_> {
    type Target = Session;
    fn deref(&self) -> &Session {
        self.0.as_ref().expect("checked on construction")
    }
}

struct SessionWrite<'a>(RwLockWriteGuard<'a, Option<Session>>);

impl std::ops::Deref for SessionWrite<'_> {
    type Target = Session;
    fn deref(&self) -> &Session {
        self.0.as_ref().expect("checked on construction")
    }
}

impl std::ops::DerefMut for SessionWrite<'_> {
    fn deref_mut(&mut self) -> &mut Session {
        self.0.as_mut().expect("checked on construction")
    }
}

/// The API router, plus static files from `static_dir` at `/` when given.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/facades", get(list_facades))
        .route("/facades/{id}/image", get(facade_image))
        .route("/facades/{id}/scene", get(facade_scene))
        .route("/clusters", get(list_clusters).post(create_cluster))
        .route("/clusters/{id}", get(get_cluster))
        .route("/clusters/{id}/infer", post(infer_cluster))
        .route("/clusters/{id}/grammar", get(get_grammar).put(put_grammar).patch(put_grammar))
        .route("/clusters/{id}/mesh", get(cluster_mesh))
        .route("/session/save", post(save_session))
        .with_state(state);
    let app = Router::new().nest("/api/v1", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}

fn etag(revision: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{revision}\"")).expect("digits are valid header text")
}

fn if_match(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(raw) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let text = raw.to_str().map_err(|_| ApiError::unprocessable("If-Match is not text", Some("If-Match")))?;
    let text = text.trim();
    let text = text.strip_prefix("W/").unwrap_or(text).trim_matches('"');
    text.parse()
        .map(Some)
        .map_err(|_| ApiError::unprocessable(format!("If-Match {text:?} is not a revision"), Some("If-Match")))
}

#[derive(Serialize)]
struct FacadeSummary<'a> {
    id: &'a str,
    image_url: String,
    width: u32,
    height: u32,
    boxes: Vec<BoxView>,
}

#[derive(Serialize)]
struct BoxView {
    id: usize,
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
    cluster_id: Option<String>,
}

async fn list_facades(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.read()?;
    let facades: Vec<FacadeSummary> = session
        .facades()
        .map(|f| FacadeSummary {
            id: &f.record.id,
            image_url: format!("/api/v1/facades/{}/image", f.record.id),
            width: f.record.width,
            height: f.record.height,
            boxes: f
                .record
                .boxes
                .iter()
                .map(|b| BoxView {
                    id: b.id,
                    xmin: b.xmin,
                    ymin: b.ymin,
                    xmax: b.xmax,
                    ymax: b.ymax,
                    cluster_id: session
                        .owner(&fenestra_core::inference::MemberRef {
                            facade_id: f.record.id.clone(),
                            box_id: b.id,
                        })
                        .map(str::to_string),
                })
                .collect(),
        })
        .collect();
    Ok(Json(json!({ "facades": facades })))
}

async fn facade_image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.read()?;
    let facade = session.facade(&id)?;
    let mut bytes = Vec::new();
    facade
        .image
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn facade_scene(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let obj = state.read()?.scene_obj(&id)?;
    Ok(obj_response(obj))
}

fn obj_response(obj: String) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], obj).into_response()
}

fn cluster_response(status: StatusCode, cluster: &Cluster) -> Response {
    let mut resp = (status, Json(cluster.view())).into_response();
    resp.headers_mut().insert(header::ETAG, etag(cluster.revision));
    resp
}

async fn list_clusters(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.read()?;
    let clusters: Vec<ClusterView> = session.clusters().map(Cluster::view).collect();
    Ok(Json(json!({ "clusters": clusters })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewCluster {
    facade_id: String,
    box_ids: Vec<usize>,
}

async fn create_cluster(State(state): State<AppState>, body: Result<Json<NewCluster>, axum::extract::rejection::JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text(), None))?;
    let mut session = state.write()?;
    let cluster = session.create_cluster(&req.facade_id, &req.box_ids)?;
    Ok(cluster_response(StatusCode::CREATED, cluster))
}

async fn get_cluster(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.read()?;
    Ok(cluster_response(StatusCode::OK, session.cluster(&id)?))
}

#[derive(Serialize)]
struct Ranked {
    class: usize,
    label: String,
    probability: f64,
}

#[derive(Serialize)]
struct MemberView<'a> {
    facade_id: &'a str,
    box_id: usize,
    #[serde(flatten)]
    prediction: &'a WindowPrediction,
    top: Vec<Ranked>,
}

fn ranked(p: &WindowPrediction) -> Vec<Ranked> {
    p.top_k(TOP_K)
        .into_iter()
        .map(|class| Ranked {
            class,
            label: WindowType::from_index(class).map(|t| t.to_string()).unwrap_or_default(),
            probability: p.probabilities[class],
        })
        .collect()
}

async fn infer_cluster(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let patches = state.read()?.member_patches(&id)?;
    let model = state.model()?;
    let grouped = tokio::task::spawn_blocking(move || grouped_inference(&model, &patches))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let mut session = state.write()?;
    let revision = session.apply_inference(&id, &grouped)?;
    let cluster = session.cluster(&id)?;
    let members: Vec<MemberView> = cluster
        .record
        .members
        .iter()
        .zip(&grouped.members)
        .map(|(m, p)| MemberView {
            facade_id: &m.facade_id,
            box_id: m.box_id,
            prediction: p,
            top: ranked(p),
        })
        .collect();
    let body = json!({
        "cluster_id": id,
        "revision": revision,
        "window_type": grouped.window_type,
        "window_class": grouped.window_type.index(),
        "label": grouped.window_type.to_string(),
        "params": grouped.params,
        "grammar": grouped.grammar,
        "members": members,
    });
    let mut resp = Json(body).into_response();
    resp.headers_mut().insert(header::ETAG, etag(revision));
    Ok(resp)
}

async fn get_grammar(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.read()?;
    let cluster = session.cluster(&id)?;
    let grammar = cluster
        .record
        .grammar
        .as_ref()
        .ok_or_else(|| ApiError::Conflict(format!("cluster {id} has no grammar yet")))?;
    let mut resp = Json(grammar).into_response();
    resp.headers_mut().insert(header::ETAG, etag(cluster.revision));
    Ok(resp)
}

async fn put_grammar(State(state): State<AppState>, Path(id): Path<String>, headers: HeaderMap, body: String) -> Result<Response, ApiError> {
    let expected = if_match(&headers)?;
    let mut session = state.write()?;
    session.update_grammar(&id, &body, expected)?;
    Ok(cluster_response(StatusCode::OK, session.cluster(&id)?))
}

async fn cluster_mesh(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.read()?;
    let obj = session.mesh_obj(&id)?;
    let mut resp = obj_response(obj);
    resp.headers_mut().insert(header::ETAG, etag(session.cluster(&id)?.revision));
    Ok(resp)
}

pub const MANIFEST_FILE: &str = "facades.json";
pub const CLUSTERS_FILE: &str = "clusters.json";

async fn save_session(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let dir = state
        .snapshot_dir
        .clone()
        .ok_or_else(|| ApiError::Conflict("no snapshot directory configured".into()))?;
    let (facades, clusters) = {
        let session = state.read()?;
        let snap = session.snapshot();
        (pretty(&snap.facades)?, pretty(&snap.clusters)?)
    };
    std::fs::create_dir_all(&dir).map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for (name, text) in [(MANIFEST_FILE, facades), (CLUSTERS_FILE, clusters)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(Json(json!({ "manifest": written[0], "clusters": written[1] })))
}

fn pretty<T: Serialize>(value: &T) -> Result<String, ApiError> {
    serde_json::to_string_pretty(value).map_err(|e| ApiError::Internal(e.to_string()))
}
