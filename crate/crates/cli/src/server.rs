//! HTTP front end over a model registry.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use capfuse::service::{CandidateKind, PredictRequest, RecommendRequest, Registry};
use capfuse::Error;

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::NotLoaded(_) => StatusCode::SERVICE_UNAVAILABLE,
            Error::MissingField { .. }
            | Error::Precondition(_)
            | Error::Config(_)
            | Error::Range(_)
            | Error::Parse(_)
            | Error::Json(_)
            | Error::UnboundPlaceholder(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs CPU-bound scoring off the async workers.
async fn blocking<F>(f: F) -> ApiResult
where
    F: FnOnce() -> capfuse::Result<Value> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
        }),
    }
}

async fn health(State(reg): State<Arc<Registry>>) -> Json<Value> {
    Json(json!(reg.health()))
}

async fn models(State(reg): State<Arc<Registry>>) -> Json<Value> {
    Json(json!({ "models": reg.infos() }))
}

async fn predict(State(reg): State<Arc<Registry>>, body: Bytes) -> ApiResult {
    let req: PredictRequest = parse(&body)?;
    blocking(move || Ok(json!(reg.predict(&req)?))).await
}

/// The path fixes the candidate kind; a body may repeat it but not
/// contradict it.
async fn recommend_kind(reg: Arc<Registry>, body: Bytes, kind: CandidateKind) -> ApiResult {
    let mut v: Value = parse(&body)?;
    let Some(obj) = v.as_object_mut() else {
        return Err(ApiError::bad_request("request body must be an object"));
    };
    let expected = json!(kind);
    match obj.get("kind") {
        None => {
            obj.insert("kind".into(), expected);
        }
        Some(k) if *k == expected => {}
        Some(k) => return Err(ApiError::bad_request(format!("kind {k} does not match this endpoint ({expected})"))),
    }
    let req: RecommendRequest = serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    blocking(move || Ok(json!(reg.recommend(&req)?))).await
}

async fn recommend_authors(State(reg): State<Arc<Registry>>, body: Bytes) -> ApiResult {
    recommend_kind(reg, body, CandidateKind::AuthorGroups).await
}

async fn recommend_ideas(State(reg): State<Arc<Registry>>, body: Bytes) -> ApiResult {
    recommend_kind(reg, body, CandidateKind::Ideas).await
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        message: "no such route".into(),
    }
}

/// `/v1` routes, plus static files from `static_dir` for every other path.
pub fn router(registry: Arc<Registry>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/predict", post(predict))
        .route("/v1/recommend/authors", post(recommend_authors))
        .route("/v1/recommend/ideas", post(recommend_ideas))
        .with_state(registry);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.fallback(not_found),
    }
}

/// Binds `addr` and serves until the process stops.
pub async fn serve(router: Router, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Serves on an ephemeral port from a background thread; returns the
/// bound address. Used by tests and local demos.
pub fn spawn(router: Router) -> anyhow::Result<SocketAddr> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx.send(Err(anyhow::Error::from(e)));
                return;
            }
        };
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind("127.0.0.1:0").await {
                Ok(l) => l,
                Err(e) => {
                    let _ = tx.send(Err(e.into()));
                    return;
                }
            };
            let _ = tx.send(listener.local_addr().map_err(Into::into));
            let _ = axum::serve(listener, router).await;
        });
    });
    rx.recv()?
}
