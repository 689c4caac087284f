//! HTTP annotation service: a human stands in for the oracle.
//!
//! The server runs on its own thread. The CAL loop talks to it through
//! [`HttpOracle`], which publishes a batch and blocks until every item has
//! been labelled or skipped. All endpoints live under `/api/v1`.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::metrics::{cal_record_rows, MetricsRow};
use crate::cal::{AnnotationRequest, CalRecord, Oracle};
use crate::error::{Error, Result};
use crate::objectives::MISSING_LABEL;
use crate::synthdata::{DatasetBundle, SynthConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub name: String,
    pub classes: Vec<String>,
}

pub fn schema_of(config: &SynthConfig) -> Vec<AttributeSchema> {
    config
        .attributes
        .iter()
        .map(|a| AttributeSchema {
            name: a.name.clone(),
            classes: a.classes.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub id: u64,
    /// Path of the PNG rendering, relative to the server root.
    pub image: String,
    pub schema: Vec<AttributeSchema>,
    /// Model argmax per task.
    pub suggestions: Option<Vec<usize>>,
    /// `None` while pending.
    pub labels: Option<Vec<i32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServicePhase {
    Idle,
    Annotating,
    Training,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub phase: ServicePhase,
    pub iteration: usize,
    pub labeled: usize,
    pub pending: usize,
    pub budget_remaining: usize,
    pub avg_accuracy: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSubmission {
    id: u64,
    labels: Vec<i32>,
}

struct Inner {
    phase: ServicePhase,
    iteration: usize,
    schema: Vec<AttributeSchema>,
    items: Vec<AnnotationItem>,
    images: BTreeMap<u64, Vec<u8>>,
    labeled: usize,
    budget_remaining: usize,
    avg_accuracy: Option<f64>,
    metrics: Vec<MetricsRow>,
}

impl Inner {
    fn pending(&self) -> usize {
        self.items.iter().filter(|i| i.labels.is_none()).count()
    }

    fn status(&self) -> Status {
        Status {
            phase: self.phase,
            iteration: self.iteration,
            labeled: self.labeled,
            pending: if self.phase == ServicePhase::Annotating { self.pending() } else { 0 },
            budget_remaining: self.budget_remaining,
            avg_accuracy: self.avg_accuracy,
        }
    }

    /// Hands the batch back to the trainer once nothing is pending.
    fn release_if_complete(&mut self) -> bool {
        if self.phase == ServicePhase::Annotating && self.pending() == 0 {
            self.phase = ServicePhase::Training;
            true
        } else {
            self.phase != ServicePhase::Annotating
        }
    }
}

struct Shared {
    inner: Mutex<Inner>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn error_body(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    let body = serde_json::json!({ "error": kind, "message": message.into() });
    (status, Json(body)).into_response()
}

async fn get_status(State(s): State<Arc<Shared>>) -> Json<Status> {
    Json(s.lock().status())
}

async fn get_queue(State(s): State<Arc<Shared>>) -> Json<Vec<AnnotationItem>> {
    let inner = s.lock();
    if inner.phase != ServicePhase::Annotating {
        return Json(Vec::new());
    }
    Json(inner.items.iter().filter(|i| i.labels.is_none()).cloned().collect())
}

async fn get_image(State(s): State<Arc<Shared>>, Path(id): Path<u64>) -> Response {
    match s.lock().images.get(&id) {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], png.clone()).into_response(),
        None => error_body(StatusCode::NOT_FOUND, "lookup", format!("no image for item {id}")),
    }
}

async fn post_labels(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    let sub: LabelSubmission = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error_body(StatusCode::BAD_REQUEST, "format", e.to_string()),
    };
    let mut inner = s.lock();
    let annotating = inner.phase == ServicePhase::Annotating;
    let schema_len = inner.schema.len();
    let Some(pos) = inner.items.iter().position(|i| i.id == sub.id).filter(|_| annotating) else {
        return error_body(StatusCode::CONFLICT, "conflict", format!("item {} is not in the queue", sub.id));
    };
    if inner.items[pos].labels.is_some() {
        return error_body(StatusCode::CONFLICT, "conflict", format!("item {} is already labeled", sub.id));
    }
    if sub.labels.len() != schema_len {
        return error_body(
            StatusCode::BAD_REQUEST,
            "contract",
            format!("{} labels for {schema_len} attributes", sub.labels.len()),
        );
    }
    for (m, (&l, a)) in sub.labels.iter().zip(&inner.schema).enumerate() {
        if l != MISSING_LABEL && !(0..a.classes.len() as i32).contains(&l) {
            return error_body(
                StatusCode::BAD_REQUEST,
                "contract",
                format!("label {l} invalid for attribute {} ({})", m + 1, a.name),
            );
        }
    }
    inner.items[pos].labels = Some(sub.labels);
    inner.labeled += 1;
    inner.release_if_complete();
    let status = inner.status();
    drop(inner);
    s.changed.notify_all();
    Json(status).into_response()
}

async fn post_advance(State(s): State<Arc<Shared>>) -> Response {
    let mut inner = s.lock();
    if !inner.release_if_complete() {
        let pending = inner.pending();
        return error_body(StatusCode::CONFLICT, "conflict", format!("{pending} items still pending"));
    }
    let status = inner.status();
    drop(inner);
    s.changed.notify_all();
    Json(status).into_response()
}

async fn get_metrics(State(s): State<Arc<Shared>>) -> Json<Vec<MetricsRow>> {
    Json(s.lock().metrics.clone())
}

fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/api/v1/status", get(get_status))
        .route("/api/v1/queue", get(get_queue))
        .route("/api/v1/image/{id}", get(get_image))
        .route("/api/v1/labels", post(post_labels))
        .route("/api/v1/advance", post(post_advance))
        .route("/api/v1/metrics", get(get_metrics))
        .with_state(shared)
}

/// A running annotation server. Dropping it stops the server.
pub struct AnnotationService {
    shared: Arc<Shared>,
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl AnnotationService {
    /// Binds `addr` (port 0 picks a free port) and starts serving.
    pub fn start(addr: SocketAddr, schema: Vec<AttributeSchema>, budget_remaining: usize) -> Result<Self> {
        let io = |e: std::io::Error| Error::io(format!("tcp://{addr}"), e);
        let listener = TcpListener::bind(addr).map_err(io)?;
        listener.set_nonblocking(true).map_err(io)?;
        let addr = listener.local_addr().map_err(io)?;
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner {
                phase: ServicePhase::Idle,
                iteration: 0,
                schema,
                items: Vec::new(),
                images: BTreeMap::new(),
                labeled: 0,
                budget_remaining,
                avg_accuracy: None,
                metrics: Vec::new(),
            }),
            changed: Condvar::new(),
        });
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .map_err(io)?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let app = router(shared.clone());
        let thread = std::thread::Builder::new()
            .name("annotation-service".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let listener = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            log::error!("annotation service: {e}");
                            return;
                        }
                    };
                    let shutdown = async {
                        let _ = stopped.await;
                    };
                    if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                        log::error!("annotation service: {e}");
                    }
                });
            })
            .map_err(io)?;
        log::info!("annotation service listening on http://{addr}/api/v1");
        Ok(Self {
            shared,
            addr,
            stop: Some(stop),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/api/v1", self.addr)
    }

    pub fn status(&self) -> Status {
        self.shared.lock().status()
    }

    /// Oracle that routes requests to this service. `timeout` bounds the wait
    /// for one batch.
    pub fn oracle<'a>(&self, data: &'a DatasetBundle, seed: u64, timeout: Option<Duration>) -> HttpOracle<'a> {
        HttpOracle {
            shared: self.shared.clone(),
            data,
            seed,
            timeout,
        }
    }

    /// Marks the run finished; the server keeps answering until dropped.
    pub fn finish(&self) {
        let mut inner = self.shared.lock();
        inner.phase = ServicePhase::Done;
        inner.items.clear();
        inner.images.clear();
    }
}

impl Drop for AnnotationService {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// 8-bit RGB PNG of a channel-major image in [0, 1].
pub fn encode_png(image: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    let plane = height * width;
    if image.len() != 3 * plane {
        return Err(Error::Dimension(format!(
            "image has {} values, expected 3x{height}x{width}",
            image.len()
        )));
    }
    let mut rgb = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            rgb[3 * p + c] = (image[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let mut out = Vec::new();
    let fmt = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&rgb).map_err(fmt)?;
    writer.finish().map_err(fmt)?;
    Ok(out)
}

/// Oracle backed by the annotation service.
pub struct HttpOracle<'a> {
    shared: Arc<Shared>,
    data: &'a DatasetBundle,
    seed: u64,
    timeout: Option<Duration>,
}

impl Oracle for HttpOracle<'_> {
    fn annotate(&mut self, request: &AnnotationRequest) -> Result<Vec<Vec<i32>>> {
        if request.ids.is_empty() {
            return Ok(Vec::new());
        }
        let (h, w) = (self.data.config.height, self.data.config.width);
        let mut items = Vec::with_capacity(request.ids.len());
        let mut images = BTreeMap::new();
        let mut inner = self.shared.lock();
        for (k, &id) in request.ids.iter().enumerate() {
            let e = self.data.get(id)?;
            images.insert(id, encode_png(&e.image, h, w)?);
            items.push(AnnotationItem {
                id,
                image: format!("/api/v1/image/{id}"),
                schema: inner.schema.clone(),
                suggestions: request.suggestions.as_ref().and_then(|s| s.get(k).cloned()),
                labels: None,
            });
        }
        inner.items = items;
        inner.images = images;
        inner.iteration = request.iteration;
        inner.phase = ServicePhase::Annotating;
        self.shared.changed.notify_all();
        log::info!("iteration {}: {} items queued for annotation", request.iteration, request.ids.len());

        let deadline = self.timeout.map(|t| Instant::now() + t);
        while inner.phase == ServicePhase::Annotating {
            match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        inner.phase = ServicePhase::Idle;
                        inner.items.clear();
                        return Err(Error::Contract(format!(
                            "annotation of iteration {} timed out",
                            request.iteration
                        )));
                    }
                    inner = self
                        .shared
                        .changed
                        .wait_timeout(inner, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0;
                }
                None => inner = self.shared.changed.wait(inner).unwrap_or_else(|p| p.into_inner()),
            }
        }
        let by_id: BTreeMap<u64, Vec<i32>> = inner
            .items
            .iter()
            .filter_map(|i| i.labels.clone().map(|l| (i.id, l)))
            .collect();
        request
            .ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::Consistency(format!("item {id} left the queue unlabeled")))
            })
            .collect()
    }

    fn progress(&mut self, record: &CalRecord, budget_remaining: usize) {
        let mut inner = self.shared.lock();
        inner.iteration = record.iteration;
        inner.budget_remaining = budget_remaining;
        inner.avg_accuracy = record.test.average;
        inner.metrics.extend(cal_record_rows(record, self.seed));
    }
}
