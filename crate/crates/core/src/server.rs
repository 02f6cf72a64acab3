//! Read-only HTTP API over a finalized bundle.
//!
//! | route | body |
//! |---|---|
//! | `GET /api/summary` | dataset summary, `k_list`, split names |
//! | `GET /api/clusters?k=K` | `K` metric rows with centroid `coords`, by id |
//! | `GET /api/clusters/{k}/{cid}/samples` | members of one cluster |
//! | `GET /api/labels?q=text` | labels containing `text`, any case |
//! | `GET /api/label-clusters?k=K&classes=a,b` | ids of clusters holding any class |
//! | `GET /thumbs/{id}`, `GET /images/{id}` | image bytes |
//!
//! Errors are JSON `{"error": ..., "reason": ...}`. Every API route answers
//! 503 with `Retry-After` until the bundle has finished loading.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::Serialize;
use thiserror::Error;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::dataset::{file_stem_for_id, parse_manifest, ImageRecord, Side, SplitNames};
use crate::json::to_bytes;
use crate::metrics::{ClusterMetricsRecord, SummaryRecord};
use crate::pipeline::{
    clusters_file, metrics_file, projection_clusters_file, projection_samples_dir,
    read_flag_bitsets, ClustersRecord, MediaIndex, MetricsFile, ProjectionRecord, RunRecord,
    FINALIZED_MARKER, FLAGS_FILE, MANIFEST_FILE, MEDIA_FILE, RUN_FILE,
};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("{0} is not a finalized bundle (missing or stale {FINALIZED_MARKER})")]
    NotFinalized(PathBuf),
    #[error("{file}: {message}")]
    Corrupt { file: String, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn corrupt(file: impl Into<String>, message: impl std::fmt::Display) -> ServerError {
    ServerError::Corrupt {
        file: file.into(),
        message: message.to_string(),
    }
}

/// One sample as returned by the samples route.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRow {
    pub id: String,
    pub split: Side,
    pub split_name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thumb_url: Option<String>,
    /// Whether the sample lies inside the other split's manifold: the
    /// precision flag for right samples, the recall flag for left ones.
    pub in_other_manifold: bool,
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRow {
    #[serde(flatten)]
    pub metrics: ClusterMetricsRecord,
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryResponse {
    #[serde(flatten)]
    pub summary: SummaryRecord,
    pub k_list: Vec<usize>,
    pub split_names: SplitNames,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelCount {
    pub label: String,
    pub count: usize,
}

#[derive(Debug)]
struct KView {
    /// Response bodies are rendered once at load.
    clusters_body: Vec<u8>,
    samples_bodies: Vec<Vec<u8>>,
    assignments: Vec<usize>,
}

/// Memory-resident index of one finalized bundle. Never mutated after load.
#[derive(Debug)]
pub struct BundleView {
    dir: PathBuf,
    run: RunRecord,
    records: Vec<ImageRecord>,
    ids: HashMap<String, usize>,
    labels: BTreeMap<String, Vec<usize>>,
    media: MediaIndex,
    summary_body: Vec<u8>,
    per_k: BTreeMap<usize, KView>,
}

/// Fails unless `dir` carries a marker matching its `run.json`.
pub fn check_finalized(dir: &Path) -> Result<RunRecord, ServerError> {
    let not_final = || ServerError::NotFinalized(dir.to_path_buf());
    let marker = std::fs::read_to_string(dir.join(FINALIZED_MARKER)).map_err(|_| not_final())?;
    let run_bytes = std::fs::read(dir.join(RUN_FILE)).map_err(|_| not_final())?;
    let run: RunRecord = serde_json::from_slice(&run_bytes).map_err(|e| corrupt(RUN_FILE, e))?;
    if marker.trim() != run.config_hash {
        return Err(not_final());
    }
    Ok(run)
}

fn read_json<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T, ServerError> {
    let bytes = std::fs::read(dir.join(name)).map_err(|e| corrupt(name, e))?;
    serde_json::from_slice(&bytes).map_err(|e| corrupt(name, e))
}

/// Within one split: labeled members grouped by label in order of the
/// label's first appearance, then unlabeled members. Manifest order is kept
/// inside every group.
fn display_order(rows: &[usize], records: &[ImageRecord]) -> Vec<usize> {
    let mut out = Vec::with_capacity(rows.len());
    for side in [Side::Left, Side::Right] {
        let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
        let mut unlabeled = Vec::new();
        for &r in rows.iter().filter(|&&r| records[r].split == side) {
            match records[r].label.as_deref() {
                Some(label) => match groups.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, g)) => g.push(r),
                    None => groups.push((label, vec![r])),
                },
                None => unlabeled.push(r),
            }
        }
        out.extend(groups.into_iter().flat_map(|(_, g)| g));
        out.extend(unlabeled);
    }
    out
}

/// URL path under which a thumbnail or image is served.
pub fn media_url(kind: &str, id: &str) -> String {
    format!("/{kind}/{}", file_stem_for_id(id))
}

impl BundleView {
    /// Loads every index of a finalized bundle.
    pub fn load(dir: &Path) -> Result<Self, ServerError> {
        let run = check_finalized(dir)?;
        let manifest_bytes = std::fs::read(dir.join(MANIFEST_FILE)).map_err(|e| corrupt(MANIFEST_FILE, e))?;
        let records = parse_manifest(manifest_bytes.as_slice(), &run.split_names)
            .map_err(|e| corrupt(MANIFEST_FILE, e))?;
        let n = records.len();
        if n != run.n_total {
            return Err(corrupt(MANIFEST_FILE, format!("{n} records, run.json says {}", run.n_total)));
        }
        let flags_bytes = std::fs::read(dir.join(FLAGS_FILE)).map_err(|e| corrupt(FLAGS_FILE, e))?;
        let flags = read_flag_bitsets(&flags_bytes, n).ok_or_else(|| corrupt(FLAGS_FILE, "wrong length"))?;
        let media: MediaIndex = read_json(dir, MEDIA_FILE)?;

        let ids: HashMap<String, usize> = records.iter().map(|r| (r.id.clone(), r.row)).collect();
        let mut labels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for r in &records {
            if let Some(l) = &r.label {
                labels.entry(l.clone()).or_default().push(r.row);
            }
        }

        let mut summary = None;
        let mut per_k = BTreeMap::new();
        for &k in &run.k_list {
            let clusters: ClustersRecord = read_json(dir, &clusters_file(k))?;
            if clusters.assignments.len() != n || clusters.assignments.iter().any(|&c| c >= k) {
                return Err(corrupt(clusters_file(k), "assignments do not match manifest"));
            }
            let mut members = vec![Vec::new(); k];
            for (row, &c) in clusters.assignments.iter().enumerate() {
                members[c].push(row);
            }
            let metrics: MetricsFile = read_json(dir, &metrics_file(k))?;
            if metrics.clusters.len() != k || metrics.clusters.iter().enumerate().any(|(i, r)| r.id != i) {
                return Err(corrupt(metrics_file(k), format!("expected {k} rows by id")));
            }
            let centroids: ProjectionRecord = read_json(dir, &projection_clusters_file(k))?;
            let mut centroid_xy = vec![None; k];
            for (&id, &xy) in centroids.ids.iter().zip(&centroids.coords) {
                if id < k {
                    centroid_xy[id] = Some(xy);
                }
            }
            let rows = metrics
                .clusters
                .iter()
                .zip(&centroid_xy)
                .map(|(m, xy)| {
                    Ok(ClusterRow {
                        metrics: m.clone(),
                        coords: xy.ok_or_else(|| corrupt(projection_clusters_file(k), "missing centroid"))?,
                    })
                })
                .collect::<Result<Vec<_>, ServerError>>()?;

            let mut samples_bodies = Vec::with_capacity(k);
            for (cid, rows_c) in members.iter().enumerate() {
                let name = format!("{}/{cid}.json", projection_samples_dir(k));
                let proj: ProjectionRecord = read_json(dir, &name)?;
                let xy: HashMap<usize, [f64; 2]> = proj.ids.iter().copied().zip(proj.coords.iter().copied()).collect();
                let samples = display_order(rows_c, &records)
                    .into_iter()
                    .map(|r| {
                        let rec = &records[r];
                        Ok(SampleRow {
                            id: rec.id.clone(),
                            split: rec.split,
                            split_name: run.split_names.name(rec.split).to_string(),
                            label: rec.label.clone(),
                            thumb_url: media.thumbnails.contains_key(&rec.id).then(|| media_url("thumbs", &rec.id)),
                            in_other_manifold: match rec.split {
                                Side::Right => flags[r].0,
                                Side::Left => flags[r].1,
                            },
                            coords: *xy.get(&r).ok_or_else(|| corrupt(name.clone(), format!("row {r} missing")))?,
                        })
                    })
                    .collect::<Result<Vec<_>, ServerError>>()?;
                samples_bodies.push(to_bytes(&samples));
            }
            summary.get_or_insert(metrics.summary);
            per_k.insert(
                k,
                KView {
                    clusters_body: to_bytes(&rows),
                    samples_bodies,
                    assignments: clusters.assignments,
                },
            );
        }
        let summary = summary.ok_or_else(|| corrupt(RUN_FILE, "empty k_list"))?;
        let summary_body = to_bytes(&SummaryResponse {
            summary,
            k_list: run.k_list.clone(),
            split_names: run.split_names.clone(),
        });
        Ok(BundleView {
            dir: dir.to_path_buf(),
            run,
            records,
            ids,
            labels,
            media,
            summary_body,
            per_k,
        })
    }

    pub fn run(&self) -> &RunRecord {
        &self.run
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    /// Labels containing `query`, ignoring case, with their image counts.
    pub fn search_labels(&self, query: &str) -> Vec<LabelCount> {
        let q = query.to_lowercase();
        self.labels
            .iter()
            .filter(|(l, _)| l.to_lowercase().contains(&q))
            .map(|(l, rows)| LabelCount {
                label: l.clone(),
                count: rows.len(),
            })
            .collect()
    }

    /// Ids of the clusters at `k` that hold at least one image of any of
    /// `classes`, ascending. `None` if `k` is not in the bundle.
    pub fn label_clusters(&self, k: usize, classes: &[&str]) -> Option<Vec<usize>> {
        let view = self.per_k.get(&k)?;
        let mut hit = vec![false; k];
        for class in classes {
            for &row in self.labels.get(*class).into_iter().flatten() {
                hit[view.assignments[row]] = true;
            }
        }
        Some((0..k).filter(|&c| hit[c]).collect())
    }
}

/// Shared server state: empty until the bundle has loaded.
#[derive(Debug, Clone, Default)]
pub struct AppState {
    view: Arc<OnceLock<Arc<BundleView>>>,
}

impl AppState {
    pub fn pending() -> Self {
        AppState::default()
    }

    pub fn loaded(view: BundleView) -> Self {
        let state = AppState::default();
        state.set(view);
        state
    }

    /// Publishes the loaded view. Later calls are ignored.
    pub fn set(&self, view: BundleView) {
        let _ = self.view.set(Arc::new(view));
    }

    pub fn get(&self) -> Option<Arc<BundleView>> {
        self.view.get().cloned()
    }
}

fn json_body(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, error: &str, reason: &str) -> Response {
    #[derive(Serialize)]
    struct Body<'a> {
        error: &'a str,
        reason: &'a str,
    }
    json_body(status, to_bytes(&Body { error, reason }))
}

fn not_found(reason: &str) -> Response {
    error(StatusCode::NOT_FOUND, "not_found", reason)
}

fn bad_request(reason: &str) -> Response {
    error(StatusCode::BAD_REQUEST, "bad_request", reason)
}

fn unavailable() -> Response {
    let mut resp = error(StatusCode::SERVICE_UNAVAILABLE, "loading", "bundle_loading");
    resp.headers_mut()
        .insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
    resp
}

macro_rules! view_or_503 {
    ($state:expr) => {
        match $state.get() {
            Some(v) => v,
            None => return unavailable(),
        }
    };
}

fn parse_k(params: &HashMap<String, String>) -> Result<usize, Response> {
    let raw = params.get("k").ok_or_else(|| bad_request("missing_k"))?;
    raw.parse().map_err(|_| bad_request("invalid_k"))
}

async fn summary(State(state): State<AppState>) -> Response {
    let view = view_or_503!(state);
    json_body(StatusCode::OK, view.summary_body.clone())
}

async fn clusters(State(state): State<AppState>, Query(params): Query<HashMap<String, String>>) -> Response {
    let view = view_or_503!(state);
    let k = match parse_k(&params) {
        Ok(k) => k,
        Err(resp) => return resp,
    };
    match view.per_k.get(&k) {
        Some(kv) => json_body(StatusCode::OK, kv.clusters_body.clone()),
        None => not_found("unknown_k"),
    }
}

async fn samples(State(state): State<AppState>, UrlPath((k, cid)): UrlPath<(String, String)>) -> Response {
    let view = view_or_503!(state);
    let (Ok(k), Ok(cid)) = (k.parse::<usize>(), cid.parse::<usize>()) else {
        return bad_request("invalid_path");
    };
    let Some(kv) = view.per_k.get(&k) else {
        return not_found("unknown_k");
    };
    match kv.samples_bodies.get(cid) {
        Some(body) => json_body(StatusCode::OK, body.clone()),
        None => not_found("unknown_cluster"),
    }
}

async fn labels(State(state): State<AppState>, Query(params): Query<HashMap<String, String>>) -> Response {
    let view = view_or_503!(state);
    let q = params.get("q").map(String::as_str).unwrap_or("");
    json_body(StatusCode::OK, to_bytes(&view.search_labels(q)))
}

async fn label_clusters(State(state): State<AppState>, Query(params): Query<HashMap<String, String>>) -> Response {
    let view = view_or_503!(state);
    let k = match parse_k(&params) {
        Ok(k) => k,
        Err(resp) => return resp,
    };
    let classes: Vec<&str> = params
        .get("classes")
        .map(|c| c.split(',').filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();
    match view.label_clusters(k, &classes) {
        Some(ids) => json_body(StatusCode::OK, to_bytes(&ids)),
        None => not_found("unknown_k"),
    }
}

fn content_type(path: &str) -> &'static str {
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn media(view: Arc<BundleView>, id: String, thumbs: bool) -> Response {
    let map = if thumbs { &view.media.thumbnails } else { &view.media.images };
    if map.is_empty() {
        return not_found("no_images");
    }
    if !view.ids.contains_key(&id) {
        return not_found("unknown_id");
    }
    let Some(rel) = map.get(&id) else {
        return not_found("no_image_for_id");
    };
    match tokio::fs::read(view.dir.join(rel)).await {
        Ok(bytes) => (
            StatusCode::OK,
            [
                (header::CONTENT_TYPE, content_type(rel)),
                (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
            ],
            bytes,
        )
            .into_response(),
        Err(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "io", "unreadable_image"),
    }
}

async fn thumb(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let view = view_or_503!(state);
    media(view, id, true).await
}

async fn image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let view = view_or_503!(state);
    media(view, id, false).await
}

async fn index() -> Html<&'static str> {
    Html(
        "<!doctype html><title>ravel</title><p>Bundle API is up. \
         Start the server with <code>--ui-dir</code> to serve the explorer.</p>",
    )
}

/// Options of [`router`].
#[derive(Debug, Clone, Default)]
pub struct ServeOptions {
    /// Static explorer build served under `/`.
    pub ui_dir: Option<PathBuf>,
    /// Allow cross-origin requests (for UI development).
    pub cors: bool,
}

pub fn router(state: AppState, options: &ServeOptions) -> Router {
    let mut app = Router::new()
        .route("/api/summary", get(summary))
        .route("/api/clusters", get(clusters))
        .route("/api/clusters/{k}/{cid}/samples", get(samples))
        .route("/api/labels", get(labels))
        .route("/api/label-clusters", get(label_clusters))
        .route("/thumbs/{id}", get(thumb))
        .route("/images/{id}", get(image));
    app = match &options.ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(index)),
    };
    let app = app.with_state(state);
    if options.cors {
        app.layer(CorsLayer::permissive())
    } else {
        app
    }
}

/// A bound but not yet serving server.
pub struct PreparedServer {
    listener: tokio::net::TcpListener,
    dir: PathBuf,
    state: AppState,
    options: ServeOptions,
}

impl PreparedServer {
    /// Checks the finalization marker, then binds. Refuses unfinalized
    /// bundles before opening any socket.
    pub async fn bind(dir: &Path, addr: SocketAddr, options: ServeOptions) -> Result<Self, ServerError> {
        check_finalized(dir)?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        Ok(PreparedServer {
            listener,
            dir: dir.to_path_buf(),
            state: AppState::pending(),
            options,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn state(&self) -> AppState {
        self.state.clone()
    }

    /// Loads the bundle in the background and serves until `shutdown`
    /// resolves. Requests made during the load get 503.
    pub async fn serve<F>(self, shutdown: F) -> Result<(), ServerError>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let state = self.state.clone();
        let dir = self.dir.clone();
        let (failed_tx, failed_rx) = tokio::sync::oneshot::channel::<ServerError>();
        tokio::task::spawn_blocking(move || match BundleView::load(&dir) {
            Ok(view) => state.set(view),
            Err(e) => {
                let _ = failed_tx.send(e);
            }
        });
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<Option<ServerError>>();
        tokio::spawn(async move {
            tokio::select! {
                _ = shutdown => { let _ = stop_tx.send(None); }
                Ok(e) = failed_rx => { let _ = stop_tx.send(Some(e)); }
            }
        });
        let load_error = Arc::new(std::sync::Mutex::new(None));
        let sink = load_error.clone();
        let app = router(self.state.clone(), &self.options);
        axum::serve(self.listener, app)
            .with_graceful_shutdown(async move {
                if let Ok(Some(e)) = stop_rx.await {
                    *sink.lock().expect("not poisoned") = Some(e);
                }
            })
            .await?;
        let err = load_error.lock().expect("not poisoned").take();
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
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
        _ = ctrl_c => {}
        _ = term => {}
    }
}
