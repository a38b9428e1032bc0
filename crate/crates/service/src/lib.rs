//! HTTP API over a screenline store.
//!
//! Every chart endpoint is a thin adapter over
//! [`screenline_core::charts`], so its body is byte-for-byte what the CLI
//! `chart` command prints for the same parameters. Errors are JSON objects
//! `{error_code, message, detail}`.

use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use screenline_core::aggregation::{AggregationError, Timeline};
use screenline_core::analytics::AnalyticsError;
use screenline_core::charts::{episode_chart, series_chart, ChartError, ChartParams};
use screenline_core::model::ModelError;
use screenline_core::pipeline::{BatchConfig, RunConfig};
use screenline_core::store::{QueryFilter, Store, StoreError};
use screenline_core::workflow::{process_registered, ProcessError};
use screenline_core::{AppearanceRecord, ChartType, CoalesceParams, EpisodeMeta, Metric};

pub const DEFAULT_MAX_INGEST_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Ingest bodies above this size get 413.
    pub max_ingest_bytes: usize,
    /// Gap and tail used when a chart request does not override them.
    pub coalesce: CoalesceParams,
    /// Defaults for POST /episodes/{id}/process.
    pub run: RunConfig,
    /// Gallery for processing; defaults to the one next to each detection file.
    pub gallery: Option<PathBuf>,
    pub metric: Option<Metric>,
    /// Directory served for every path no API route claims.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_ingest_bytes: DEFAULT_MAX_INGEST_BYTES,
            coalesce: CoalesceParams::default(),
            run: RunConfig::default(),
            gallery: None,
            metric: None,
            static_dir: None,
        }
    }
}

#[derive(Clone)]
struct AppState {
    store: Arc<Store>,
    config: Arc<ServiceConfig>,
}

/// JSON error body with a stable `error_code`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), detail: Value::Null }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn bad_params(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "BadParams", message)
    }

    fn unknown_scope(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownScope", format!("unknown {what} {id:?}")).with_detail(json!({ what: id }))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error_code": self.code, "message": self.message, "detail": self.detail });
        (self.status, Json(body)).into_response()
    }
}

impl From<ChartError> for ApiError {
    fn from(e: ChartError) -> Self {
        match &e {
            ChartError::Analytics(AnalyticsError::EmptyTimeline) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "EmptyTimeline", e.to_string())
            }
            ChartError::Analytics(AnalyticsError::MixedSeries(ids)) => {
                ApiError::bad_params(e.to_string()).with_detail(json!({ "series": ids }))
            }
            _ => ApiError::bad_params(e.to_string()),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::UnknownEpisode(id) => ApiError::unknown_scope("episode", id),
            StoreError::StorageFull { cap, requested } => {
                ApiError::new(StatusCode::INSUFFICIENT_STORAGE, "StorageFull", e.to_string())
                    .with_detail(json!({ "cap": cap, "requested": requested }))
            }
            StoreError::InvalidFilter(_) | StoreError::BadMeta(_) => ApiError::bad_params(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<ProcessError> for ApiError {
    fn from(e: ProcessError) -> Self {
        match e {
            ProcessError::UnknownEpisode(id) => ApiError::unknown_scope("episode", &id),
            ProcessError::NoDetectionFile(_) => ApiError::new(StatusCode::CONFLICT, "NoDetectionFile", e.to_string()),
            ProcessError::Detections { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "BadDetections", e.to_string()),
            ProcessError::Gallery { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "BadGallery", e.to_string()),
            ProcessError::Pipeline(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "PipelineFailed", e.to_string()),
            ProcessError::Store(s) => s.into(),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(store: Arc<Store>, config: ServiceConfig) -> Router {
    let static_dir = config.static_dir.clone();
    let limit = config.max_ingest_bytes;
    let state = AppState { store, config: Arc::new(config) };
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/episodes", get(list_episodes))
        .route("/episodes/{id}", get(get_episode))
        .route("/episodes/{id}/appearances", get(appearances))
        .route("/episodes/{id}/charts/{chart_type}", get(episode_chart_handler))
        .route("/series/{id}/charts/{chart_type}", get(series_chart_handler))
        .route("/episodes/{id}/ingest", post(ingest).layer(DefaultBodyLimit::max(limit)))
        .route("/episodes/{id}/process", post(process))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_episodes(State(s): State<AppState>) -> Json<Value> {
    Json(json!(s.store.episodes()))
}

async fn get_episode(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let info = s.store.episode(&id).ok_or_else(|| ApiError::unknown_scope("episode", &id))?;
    Ok(Json(json!(info)))
}

type Pairs = Result<Query<Vec<(String, String)>>, QueryRejection>;

fn pairs(q: Pairs) -> ApiResult<Vec<(String, String)>> {
    q.map(|Query(p)| p).map_err(|e| ApiError::bad_params(e.body_text()))
}

fn parse_u64(key: &str, value: &str) -> ApiResult<u64> {
    value.trim().parse().map_err(|_| ApiError::bad_params(format!("{key}={value:?} is not a non-negative integer")))
}

/// The stored timeline of a processed episode.
fn processed_timeline(store: &Store, id: &str) -> ApiResult<Arc<Timeline>> {
    let info = store.episode(id).ok_or_else(|| ApiError::unknown_scope("episode", id))?;
    if !info.meta.processed {
        return Err(ApiError::new(StatusCode::CONFLICT, "NotProcessed", format!("episode {id:?} is not processed yet"))
            .with_detail(json!({ "episode": id })));
    }
    store.timeline(id).ok_or_else(|| ApiError::internal("processed episode without a timeline"))
}

async fn appearances(State(s): State<AppState>, Path(id): Path<String>, q: Pairs) -> ApiResult<Json<Vec<AppearanceRecord>>> {
    let mut filter = QueryFilter::episode(id.clone());
    for (k, v) in pairs(q)? {
        match k.as_str() {
            "celebrity" => {
                let set = filter.celebrities.get_or_insert_with(Default::default);
                set.extend(v.split(',').map(str::trim).filter(|c| !c.is_empty()).map(str::to_string));
            }
            "from_ms" => filter.from_ms = Some(parse_u64(&k, &v)?),
            "to_ms" => filter.to_ms = Some(parse_u64(&k, &v)?),
            _ => return Err(ApiError::bad_params(format!("unknown parameter {k:?}"))),
        }
    }
    processed_timeline(&s.store, &id)?;
    Ok(Json(s.store.query_appearances(&filter)?))
}

fn chart_type(raw: &str) -> ApiResult<ChartType> {
    raw.parse().map_err(|e: String| ApiError::bad_params(e).with_detail(json!({ "chart_type": raw })))
}

fn chart_params(pairs: &[(String, String)]) -> ApiResult<ChartParams> {
    Ok(ChartParams::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn chart_response(spec: screenline_core::ChartSpec) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], spec.to_json()).into_response()
}

async fn episode_chart_handler(
    State(s): State<AppState>,
    Path((id, chart)): Path<(String, String)>,
    q: Pairs,
) -> ApiResult<Response> {
    let chart = chart_type(&chart)?;
    let params = chart_params(&pairs(q)?)?;
    if chart == ChartType::SeasonalComparison {
        return Err(ChartError::NeedsSeries(chart).into());
    }
    let timeline = processed_timeline(&s.store, &id)?;
    Ok(chart_response(episode_chart(&timeline, chart, &params, s.config.coalesce)?))
}

async fn series_chart_handler(
    State(s): State<AppState>,
    Path((id, chart)): Path<(String, String)>,
    q: Pairs,
) -> ApiResult<Response> {
    let chart = chart_type(&chart)?;
    let mut rest = Vec::new();
    let mut seasons: Option<Vec<u32>> = None;
    for (k, v) in pairs(q)? {
        if k == "seasons" {
            let list = v
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| p.trim().parse::<u32>().map_err(|_| ApiError::bad_params(format!("seasons={v:?} is not a list of integers"))))
                .collect::<ApiResult<Vec<u32>>>()?;
            seasons.get_or_insert_with(Vec::new).extend(list);
        } else {
            rest.push((k, v));
        }
    }
    let params = chart_params(&rest)?;
    if chart != ChartType::SeasonalComparison {
        return Err(ChartError::NeedsEpisode(chart).into());
    }

    let selected: Vec<EpisodeMeta> = s
        .store
        .episodes()
        .into_iter()
        .map(|e| e.meta)
        .filter(|m| m.series_id == id && seasons.as_ref().is_none_or(|s| s.contains(&m.season)))
        .collect();
    if selected.is_empty() {
        return Err(ApiError::unknown_scope("series", &id).with_detail(json!({ "series": id, "seasons": seasons })));
    }
    let pending: Vec<&str> = selected.iter().filter(|m| !m.processed).map(|m| m.episode_id.as_str()).collect();
    if !pending.is_empty() {
        return Err(ApiError::new(StatusCode::CONFLICT, "NotProcessed", format!("{} episode(s) not processed yet", pending.len()))
            .with_detail(json!({ "episodes": pending })));
    }
    let timelines = s.store.series_timelines(&id, seasons.as_deref());
    let refs: Vec<&Timeline> = timelines.iter().map(Arc::as_ref).collect();
    Ok(chart_response(series_chart(&refs, chart, &params, s.config.coalesce)?))
}

#[derive(serde::Deserialize)]
struct MetaLine {
    meta: EpisodeMeta,
}

fn parse_error(line: usize, message: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "ParseError", format!("line {line}: {message}")).with_detail(json!({ "line": line }))
}

/// Parses an ingest body: a `{"meta": ...}` line, then one record per line.
/// Blank lines are skipped; line numbers are 1-based.
pub fn parse_ingest(id: &str, body: &[u8]) -> Result<Timeline, ApiError> {
    let text = std::str::from_utf8(body).map_err(|e| {
        let line = body[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count() + 1;
        parse_error(line, "body is not valid UTF-8")
    })?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (meta_line, raw) = lines.next().ok_or_else(|| parse_error(1, "empty body, expected a meta line"))?;
    let meta = serde_json::from_str::<MetaLine>(raw).map_err(|e| parse_error(meta_line, e))?.meta;
    if meta.episode_id != id {
        return Err(ApiError::bad_params(format!("meta is for episode {:?}, path names {id:?}", meta.episode_id))
            .with_detail(json!({ "line": meta_line })));
    }
    meta.check().map_err(|e| ApiError::bad_params(e.to_string()).with_detail(json!({ "line": meta_line })))?;

    let mut records = Vec::new();
    let mut line_of = Vec::new();
    for (n, raw) in lines {
        records.push(serde_json::from_str::<AppearanceRecord>(raw).map_err(|e| parse_error(n, e))?);
        line_of.push(n);
    }
    Timeline::new(meta, records).map_err(|e| match e {
        AggregationError::DuplicateKey { t_ms, pos_index } => ApiError::new(StatusCode::BAD_REQUEST, "DuplicateKey", e.to_string())
            .with_detail(json!({ "t_ms": t_ms, "pos_index": pos_index })),
        AggregationError::InvalidRecord { index, ref source } => {
            let line = line_of[index];
            let message = format!("line {line}: {source}");
            let code = match source {
                ModelError::OutOfRange { .. } => "OutOfRange",
                _ => "InvalidRecord",
            };
            ApiError::new(StatusCode::BAD_REQUEST, code, message).with_detail(json!({ "line": line }))
        }
        other => ApiError::new(StatusCode::BAD_REQUEST, "InvalidRecord", other.to_string()),
    })
}

async fn ingest(State(s): State<AppState>, Path(id): Path<String>, body: Result<Bytes, BytesRejection>) -> ApiResult<Json<Value>> {
    let body = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "TooLarge", format!("body exceeds {} bytes", s.config.max_ingest_bytes))
                .with_detail(json!({ "max_bytes": s.config.max_ingest_bytes }))
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "ParseError", e.body_text())
        }
    })?;
    let store = s.store.clone();
    let episode_id = id.clone();
    // parsing and the durable write run off the async workers so reads stay responsive
    let stored = tokio::task::spawn_blocking(move || -> ApiResult<usize> {
        let timeline = parse_ingest(&id, &body)?;
        Ok(store.put_timeline(timeline)?)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(json!({ "episode_id": episode_id, "stored": stored })))
}

async fn process(State(s): State<AppState>, Path(id): Path<String>, q: Pairs) -> ApiResult<Json<Value>> {
    let mut run = s.config.run;
    let mut metric = s.config.metric;
    let mut batch: (Option<usize>, Option<usize>) = (None, None);
    for (k, v) in pairs(q)? {
        let n = || parse_u64(&k, &v).map(|n| n as usize);
        match k.as_str() {
            "workers" => run.n_workers = n()?,
            "k" => run.k = n()?,
            "detect_batch" => batch.0 = Some(n()?),
            "embed_batch" => batch.1 = Some(n()?),
            "threshold" => {
                run.threshold = v
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|t| t.is_finite())
                    .ok_or_else(|| ApiError::bad_params(format!("threshold={v:?} is not a number")))?
            }
            "metric" => metric = Some(v.parse().map_err(ApiError::bad_params)?),
            _ => return Err(ApiError::bad_params(format!("unknown parameter {k:?}"))),
        }
    }
    run.batch = BatchConfig { detect_batch: batch.0.unwrap_or(run.batch.detect_batch), embed_batch: batch.1.unwrap_or(run.batch.embed_batch), ..run.batch };
    let store = s.store.clone();
    let gallery = s.config.gallery.clone();
    let report = tokio::task::spawn_blocking(move || process_registered(&store, &id, gallery.as_deref(), metric, &run))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(json!(report)))
}
