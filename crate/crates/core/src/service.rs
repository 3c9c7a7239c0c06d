//! HTTP inference endpoint: `POST /v1/classify` with a raw PNG or JPEG body,
//! `GET /v1/healthz` for liveness.
//!
//! The model is immutable once installed. Each request draws its Monte Carlo
//! noise from `derive_seed(server_seed, SERVICE, request_id)`, so a request
//! body replayed with the same id yields the same response.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Semaphore;

use crate::bayes::{classify_with_rejection, mc_predict_seeded, McConfig};
use crate::dataset::prepare_test_image;
use crate::error::{Error, Result};
use crate::imaging::decode_image;
use crate::model::{load_checkpoint, Checkpoint};
use crate::rng::{derive_seed, stream};

pub const MAX_BODY_BYTES: usize = 10 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub mc: McConfig,
    pub server_seed: u64,
    /// Requests admitted at once; further ones get 429.
    pub max_in_flight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            mc: McConfig::default(),
            server_seed: 0,
            max_in_flight: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub label: Option<String>,
    pub class_index: Option<usize>,
    pub confidence: f64,
    pub uncertainty: f64,
    pub rejected: bool,
    pub mc_samples: usize,
    pub model_id: String,
    pub request_id: u64,
}

pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    /// SHA-256 of the checkpoint file.
    pub model_id: String,
}

impl LoadedModel {
    pub fn load(path: impl Into<PathBuf>) -> Result<Self> {
        let (checkpoint, model_id) = load_checkpoint(path.into())?;
        Ok(Self { checkpoint, model_id })
    }

    /// Decodes, centre-crops, resizes and classifies one encoded image.
    pub fn classify_bytes(&self, bytes: &[u8], mc: &McConfig, seed: u64) -> Result<ClassifyResponse> {
        let cfg = &self.checkpoint.config;
        let image = prepare_test_image(&decode_image(bytes)?, cfg.input_side)?;
        let result = mc_predict_seeded(&self.checkpoint.params, cfg, &image, mc, seed)?;
        let p = classify_with_rejection(&result, &self.checkpoint.classes, mc.reject_threshold)?;
        Ok(ClassifyResponse {
            label: (!p.rejected).then_some(p.class_name),
            class_index: (!p.rejected).then_some(p.class_index),
            confidence: p.confidence,
            uncertainty: p.uncertainty,
            rejected: p.rejected,
            mc_samples: result.samples_used,
            model_id: self.model_id.clone(),
            request_id: 0,
        })
    }
}

/// Shared handler state; cheap to clone.
#[derive(Clone)]
pub struct ServiceState {
    model: Arc<OnceLock<Arc<LoadedModel>>>,
    cfg: Arc<ServiceConfig>,
    counter: Arc<AtomicU64>,
    permits: Arc<Semaphore>,
}

impl ServiceState {
    /// State with no model yet: every endpoint answers 503 until `install`.
    pub fn new(cfg: ServiceConfig) -> Result<Self> {
        cfg.mc.validate()?;
        if cfg.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(Self {
            model: Arc::new(OnceLock::new()),
            permits: Arc::new(Semaphore::new(cfg.max_in_flight)),
            cfg: Arc::new(cfg),
            counter: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Installs the model; a second call is an error.
    pub fn install(&self, model: LoadedModel) -> Result<()> {
        self.model
            .set(Arc::new(model))
            .map_err(|_| Error::Config("a model is already loaded".into()))
    }

    pub fn model(&self) -> Option<&Arc<LoadedModel>> {
        self.model.get()
    }

    /// Seed of request `request_id`.
    pub fn request_seed(&self, request_id: u64) -> u64 {
        derive_seed(self.cfg.server_seed, stream::SERVICE, request_id)
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

async fn handle_health(State(state): State<ServiceState>) -> Response {
    match state.model() {
        Some(m) => Json(serde_json::json!({ "status": "ok", "model_id": m.model_id })).into_response(),
        None => error_response(StatusCode::SERVICE_UNAVAILABLE, "model is loading"),
    }
}

async fn handle_classify(State(state): State<ServiceState>, body: Body) -> Response {
    let Some(model) = state.model().cloned() else {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "model is loading");
    };
    let Ok(_permit) = state.permits.clone().try_acquire_owned() else {
        return error_response(StatusCode::TOO_MANY_REQUESTS, "too many requests in flight, retry later");
    };
    let bytes = match to_bytes(body, MAX_BODY_BYTES).await {
        Ok(b) => b,
        Err(_) => {
            return error_response(
                StatusCode::BAD_REQUEST,
                format!("body must be a PNG or JPEG image of at most {MAX_BODY_BYTES} bytes"),
            )
        }
    };
    let request_id = state.counter.fetch_add(1, Ordering::SeqCst);
    let seed = state.request_seed(request_id);
    let cfg = state.cfg.clone();
    let job = tokio::task::spawn_blocking(move || model.classify_bytes(&bytes, &cfg.mc, seed)).await;
    match job {
        Ok(Ok(mut response)) => {
            response.request_id = request_id;
            info!(
                "request {request_id}: label {:?} uncertainty {:.4} rejected {}",
                response.label, response.uncertainty, response.rejected
            );
            Json(response).into_response()
        }
        Ok(Err(e @ (Error::Decode(_) | Error::OutOfRange { .. } | Error::Shape(_)))) => {
            error_response(StatusCode::BAD_REQUEST, format!("cannot classify body: {e}"))
        }
        Ok(Err(e)) => {
            error!("request {request_id}: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "inference failed")
        }
        Err(e) => {
            error!("request {request_id}: inference task failed: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, "inference failed")
        }
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/v1/healthz", get(handle_health))
        .route("/v1/classify", post(handle_classify))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

/// Serves on a bound listener, loading the checkpoint in the background
/// while already answering 503. Runs until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    checkpoint: PathBuf,
    cfg: ServiceConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let state = ServiceState::new(cfg)?;
    info!("listening on {}", listener.local_addr()?);
    let loader = state.clone();
    let load = tokio::task::spawn_blocking(move || -> Result<String> {
        let model = LoadedModel::load(checkpoint)?;
        let id = model.model_id.clone();
        loader.install(model)?;
        Ok(id)
    });
    let server = tokio::spawn(async move {
        axum::serve(listener, router(state))
            .with_graceful_shutdown(shutdown)
            .await
    });
    match load.await {
        Ok(Ok(id)) => info!("model {id} loaded"),
        Ok(Err(e)) => {
            server.abort();
            return Err(e);
        }
        Err(e) => {
            server.abort();
            return Err(Error::Config(format!("model loader failed: {e}")));
        }
    }
    server
        .await
        .map_err(|e| Error::Config(format!("server task failed: {e}")))??;
    Ok(())
}
