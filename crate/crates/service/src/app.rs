//! Router, shared state and the single inference worker.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, RwLock};
use std::thread;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use funedit_core::composer::run_composite;
use funedit_core::synthgen::{sample_seed, SceneSpec};
use funedit_core::EditModel;
use serde::Deserialize;
use tokio::sync::oneshot;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::wire::{
    EditRequestWire, EditResponseWire, ErrorWire, HealthWire, OpEcho, RequestError, SampleWire, SamplesWire, TasksWire,
};

/// Requests waiting for or holding the worker beyond this are refused.
pub const MAX_PENDING: usize = 16;
/// Request bodies above this size are refused.
pub const MAX_BODY_BYTES: usize = 4 * 1024 * 1024;
pub const MAX_SAMPLES: usize = 32;
const DEFAULT_SAMPLES: usize = 4;
const SAMPLE_SIDE: usize = 64;

type Job = Box<dyn FnOnce() + Send>;

struct Loaded {
    model: Arc<EditModel>,
    version: String,
}

struct Shared {
    model: RwLock<Option<Loaded>>,
    jobs: mpsc::Sender<Job>,
    pending: AtomicUsize,
    next_id: AtomicU64,
    seed: u64,
}

/// Cheap handle to the server state. Inference runs on one worker thread in
/// submission order.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(seed: u64) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        thread::Builder::new()
            .name("inference".into())
            .spawn(move || {
                for job in rx {
                    job();
                }
            })
            .expect("spawn inference worker");
        AppState(Arc::new(Shared {
            model: RwLock::new(None),
            jobs: tx,
            pending: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
            seed,
        }))
    }

    /// Makes the model available; `/health` reports ready from here on.
    pub fn set_model(&self, model: EditModel, version: impl Into<String>) {
        *self.0.model.write().expect("model lock") = Some(Loaded { model: Arc::new(model), version: version.into() });
    }

    pub fn is_ready(&self) -> bool {
        self.0.model.read().expect("model lock").is_some()
    }

    pub fn pending(&self) -> usize {
        self.0.pending.load(Ordering::SeqCst)
    }

    fn model(&self) -> Option<(Arc<EditModel>, String)> {
        self.0.model.read().expect("model lock").as_ref().map(|l| (l.model.clone(), l.version.clone()))
    }

    fn request_id(&self) -> String {
        format!("req-{:06}", self.0.next_id.fetch_add(1, Ordering::SeqCst))
    }

    /// Queues `f` on the worker unless [`MAX_PENDING`] jobs are already
    /// queued or running.
    pub fn submit<T: Send + 'static>(&self, f: impl FnOnce() -> T + Send + 'static) -> Option<oneshot::Receiver<T>> {
        let shared = &self.0;
        if shared.pending.fetch_add(1, Ordering::SeqCst) >= MAX_PENDING {
            shared.pending.fetch_sub(1, Ordering::SeqCst);
            return None;
        }
        let (tx, rx) = oneshot::channel();
        let state = self.clone();
        let job: Job = Box::new(move || {
            let out = f();
            state.0.pending.fetch_sub(1, Ordering::SeqCst);
            let _ = tx.send(out);
        });
        if shared.jobs.send(job).is_err() {
            shared.pending.fetch_sub(1, Ordering::SeqCst);
            return None;
        }
        Some(rx)
    }
}

fn error_response(status: StatusCode, request_id: String, field: Option<String>, error: String) -> Response {
    (status, Json(ErrorWire { error, field, request_id })).into_response()
}

fn not_ready(request_id: String) -> Response {
    error_response(StatusCode::SERVICE_UNAVAILABLE, request_id, None, "model is loading".into())
}

async fn health(State(state): State<AppState>) -> Response {
    match state.model() {
        Some((_, version)) => Json(HealthWire { status: "ok".into(), checkpoint_version: Some(version) }).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(HealthWire { status: "loading".into(), checkpoint_version: None }))
            .into_response(),
    }
}

async fn tasks(State(state): State<AppState>) -> Response {
    match state.model() {
        Some((model, _)) => {
            Json(TasksWire { tasks: model.vocab.tasks().to_vec(), max_simultaneous: model.vocab.k() }).into_response()
        }
        None => not_ready(state.request_id()),
    }
}

#[derive(Debug, Deserialize)]
struct SamplesQuery {
    n: Option<usize>,
}

async fn samples(State(state): State<AppState>, query: Result<Query<SamplesQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let n = match query {
        Ok(Query(q)) => q.n.unwrap_or(DEFAULT_SAMPLES),
        Err(e) => return error_response(StatusCode::BAD_REQUEST, state.request_id(), Some("n".into()), e.body_text()),
    };
    if !(1..=MAX_SAMPLES).contains(&n) {
        let msg = format!("n must be in [1, {MAX_SAMPLES}], got {n}");
        return error_response(StatusCode::BAD_REQUEST, state.request_id(), Some("n".into()), msg);
    }
    let build = || -> funedit_core::Result<Vec<SampleWire>> {
        (0..n)
            .map(|i| {
                let seed = sample_seed(state.0.seed, i as u64);
                let scene = SceneSpec::generate(seed, SAMPLE_SIDE, SAMPLE_SIDE)?;
                Ok(SampleWire {
                    id: format!("scene-{seed}"),
                    image: scene.composite().to_base64_png()?,
                    mask: scene.shape_mask().to_base64_png()?,
                })
            })
            .collect()
    };
    match build() {
        Ok(samples) => Json(SamplesWire { samples }).into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, state.request_id(), None, e.to_string()),
    }
}

async fn edit(State(state): State<AppState>, body: Bytes) -> Response {
    let request_id = state.request_id();
    let Some((model, _)) = state.model() else {
        return not_ready(request_id);
    };
    let reject = |e: RequestError, id: String| match e {
        RequestError::BadRequest { field, message } => error_response(StatusCode::BAD_REQUEST, id, field, message),
        RequestError::Unprocessable(m) => error_response(StatusCode::UNPROCESSABLE_ENTITY, id, None, m),
    };
    let req = match EditRequestWire::parse(&body) {
        Ok(r) => r,
        Err(e) => return reject(e, request_id),
    };
    let sampler = match req.sampler(state.0.seed) {
        Ok(s) => s,
        Err(e) => return reject(e, request_id),
    };
    let edit = match req.into_edit(model.image_size()) {
        Ok(e) => e,
        Err(e) => return reject(e, request_id),
    };
    if let Err(e) = edit.validate(model.vocab.k()) {
        return error_response(StatusCode::UNPROCESSABLE_ENTITY, request_id, None, e.to_string());
    }
    let ops_echo = match edit.ops.iter().map(|op| Ok(OpEcho { task: op.task, mask: op.mask.to_base64_png()? })).collect() {
        Ok(v) => v,
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, request_id, None, funedit_core::Error::to_string(&e)),
    };
    let job = move || -> funedit_core::Result<(String, usize, f64)> {
        let start = Instant::now();
        let (out, nfe) = run_composite(&model.denoiser, &model.conditioner(), &edit, &sampler, &model.schedule)?;
        let latency = start.elapsed().as_secs_f64() * 1e3;
        Ok((out.to_base64_png()?, nfe, latency))
    };
    let Some(rx) = state.submit(job) else {
        let msg = format!("more than {MAX_PENDING} requests pending");
        return error_response(StatusCode::TOO_MANY_REQUESTS, request_id, None, msg);
    };
    match rx.await {
        Ok(Ok((image, nfe, latency_ms))) => Json(EditResponseWire { image, nfe, latency_ms, ops_echo, request_id }).into_response(),
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, request_id, None, e.to_string()),
        Err(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, request_id, None, "inference worker stopped".into()),
    }
}

async fn log_request(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_string());
    let start = Instant::now();
    let res = next.run(req).await;
    eprintln!("{method} {path} {} {:.1}ms", res.status().as_u16(), start.elapsed().as_secs_f64() * 1e3);
    res
}

/// CORS for `origin`, or for any origin when `None`.
pub fn cors_layer(origin: Option<&str>) -> CorsLayer {
    let allow = match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(v) => AllowOrigin::exact(v),
        None => AllowOrigin::any(),
    };
    CorsLayer::new().allow_origin(allow).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tasks", get(tasks))
        .route("/samples", get(samples))
        .route("/edit", post(edit))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors_layer(cors_origin))
        .layer(middleware::from_fn(log_request))
        .with_state(state)
}
