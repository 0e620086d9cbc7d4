use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::json;
use slidekit::annotations::{export_training_patches, AnnotationDocument, PatchExportOptions, TrainingManifest};
use slidekit::backend::{Backend, BackendConfig, TrainingHyperparams};
use slidekit::metrics::{document_confusion, metrics, micro_average, EvalRegion, MetricsReport};
use slidekit::pipeline::SegmentParams;
use slidekit::pyramid::{build_pyramid_from_image, check_tile_size, decode_rgb, SlidePyramid, DEFAULT_TILE_SIZE};
use slidekit::Error;
use tracing::warn;

use crate::jobs::{self, SubmitError};
use crate::store::{sha256_hex, Slide, SlideStatus};
use crate::AppState;

type St = State<Arc<AppState>>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_param", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Decode { .. } | Error::DecodeBytes(_) | Error::ZeroDimension => StatusCode::UNSUPPORTED_MEDIA_TYPE,
            Error::DiskFull { .. } => StatusCode::INSUFFICIENT_STORAGE,
            Error::RegionOutOfBounds | Error::LevelOutOfRange { .. } => StatusCode::NOT_FOUND,
            e if e.is_validation() => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.code, "message": self.message}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> slidekit::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

/// Parses a JSON body; errors name the offending field.
fn json_body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::new(StatusCode::BAD_REQUEST, "schema", format!("at {path}: {}", e.into_inner()))
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/api/slides", get(list_slides).post(upload_slide))
        .route("/api/slides/{id}", get(get_slide))
        .route("/api/slides/{id}/tiles/{level}/{xy}", get(get_tile))
        .route("/api/slides/{id}/annotations", get(get_annotations).put(put_annotations))
        .route("/api/jobs", get(list_jobs).post(submit_job))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/timing.csv", get(timing_csv))
        .route("/api/metrics", post(post_metrics))
        .route("/api/metrics/batch", post(post_metrics_batch))
        .route("/api/training/export", post(training_export))
        .route("/api/training/train", post(training_train))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

fn ready_slide(state: &AppState, id: &str) -> ApiResult<(Arc<Slide>, Arc<SlidePyramid>)> {
    let slide = state.slide(id).ok_or_else(|| ApiError::not_found(format!("slide {id}")))?;
    let pyr = slide.pyramid.get().cloned().ok_or_else(|| {
        let info = slide.snapshot();
        match info.status {
            SlideStatus::Failed => ApiError::conflict(format!("slide {id} failed: {}", info.error.unwrap_or_default())),
            _ => ApiError::conflict(format!("slide {id} is not ready")),
        }
    })?;
    Ok((slide, pyr))
}

async fn list_slides(State(st): St) -> impl IntoResponse {
    Json(st.slides())
}

async fn get_slide(State(st): St, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let slide = st.slide(&id).ok_or_else(|| ApiError::not_found(format!("slide {id}")))?;
    Ok(Json(slide.snapshot()))
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    name: Option<String>,
    tile_size: Option<u32>,
    /// Build the pyramid before answering.
    #[serde(default)]
    wait: bool,
}

async fn upload_slide(State(st): St, Query(q): Query<UploadQuery>, body: Bytes) -> ApiResult<Response> {
    let tile_size = q.tile_size.unwrap_or(DEFAULT_TILE_SIZE);
    check_tile_size(tile_size)?;
    let bytes = body.to_vec();
    let (img, sha, bytes) = blocking(move || {
        let img = decode_rgb(&bytes)?;
        let sha = sha256_hex(&bytes);
        Ok((img, sha, bytes))
    })
    .await?;
    let name = q.name.unwrap_or_else(|| format!("slide-{}", &sha[..8]));
    let slide = st.add_slide(&name, &sha, tile_size)?;
    let build_state = st.clone();
    let build_slide = slide.clone();
    let task = tokio::task::spawn_blocking(move || build(&build_state, &build_slide, &img, &bytes));
    if q.wait {
        task.await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    }
    let info = slide.snapshot();
    let location = format!("/api/slides/{}", info.id);
    let mut resp = (StatusCode::CREATED, Json(info)).into_response();
    resp.headers_mut()
        .insert(header::LOCATION, HeaderValue::from_str(&location).expect("ascii id"));
    Ok(resp)
}

/// Stores the blob and builds (or reuses) the content-addressed pyramid.
fn build(st: &AppState, slide: &Slide, img: &RgbImage, bytes: &[u8]) {
    let (sha, tile_size, id) = {
        let i = slide.info.lock();
        (i.sha256.clone(), i.tile_size, i.id.clone())
    };
    let result = (|| -> slidekit::Result<SlidePyramid> {
        let blob = st.data.blob_path(&sha);
        if !blob.exists() {
            crate::store::write_atomic(&blob, bytes)?;
        }
        let dir = st.data.pyramid_dir(&sha, tile_size);
        if let Ok(p) = SlidePyramid::open_with_cache(&dir, st.config.cache_tiles) {
            return Ok(p);
        }
        let tmp = dir.with_extension(format!("tmp-{id}"));
        let _ = std::fs::remove_dir_all(&tmp);
        build_pyramid_from_image(img, &tmp, tile_size, None)?;
        if std::fs::rename(&tmp, &dir).is_err() {
            // a concurrent upload of the same bytes won the race
            let _ = std::fs::remove_dir_all(&tmp);
        }
        SlidePyramid::open_with_cache(&dir, st.config.cache_tiles)
    })();
    let mut info = slide.info.lock();
    match result {
        Ok(p) => {
            let m = *p.meta();
            info.width = m.width0;
            info.height = m.height0;
            info.levels = m.levels;
            info.status = SlideStatus::Ready;
            let _ = slide.pyramid.set(Arc::new(p.with_slide_id(id)));
        }
        Err(e) => {
            warn!(slide = %info.id, error = %e, "pyramid build failed");
            info.status = SlideStatus::Failed;
            info.error = Some(e.to_string());
        }
    }
    if let Err(e) = st.data.save_info(&info) {
        warn!(slide = %info.id, error = %e, "could not save slide record");
    }
}

async fn get_tile(
    State(st): St,
    Path((id, level, xy)): Path<(String, u32, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let (slide, pyr) = ready_slide(&st, &id)?;
    let xy = xy.strip_suffix(".png").unwrap_or(&xy);
    let (x, y) = xy
        .split_once('_')
        .and_then(|(a, b)| Some((a.parse::<u32>().ok()?, b.parse::<u32>().ok()?)))
        .ok_or_else(|| ApiError::not_found(format!("tile {xy}")))?;
    let sha = slide.snapshot().sha256;
    let etag = format!("\"{}-t{}-{level}-{x}-{y}\"", &sha[..16], pyr.tile_size());
    let cache = [
        (header::ETAG, etag.clone()),
        (header::CACHE_CONTROL, "public, max-age=31536000, immutable".to_string()),
    ];
    if headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag))
    {
        pyr.tile_path(level, x, y).map_err(|_| ApiError::not_found(format!("tile {level}/{x}_{y}")))?;
        return Ok((StatusCode::NOT_MODIFIED, cache).into_response());
    }
    let bytes = blocking(move || pyr.tile_bytes(level, x, y)).await?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "image/png".to_string())], cache, bytes).into_response())
}

fn doc_response(status: StatusCode, doc: &AnnotationDocument) -> Response {
    (
        status,
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::ETAG, format!("\"{}\"", doc.revision)),
        ],
        doc.to_json(),
    )
        .into_response()
}

async fn get_annotations(State(st): St, Path(id): Path<String>) -> ApiResult<Response> {
    let slide = st.slide(&id).ok_or_else(|| ApiError::not_found(format!("slide {id}")))?;
    let doc = slide.doc.lock().await;
    Ok(doc_response(StatusCode::OK, &doc))
}

fn if_match(headers: &HeaderMap) -> ApiResult<Option<u64>> {
    let Some(v) = headers.get(header::IF_MATCH) else { return Ok(None) };
    let s = v.to_str().unwrap_or("").trim();
    let s = s.strip_prefix("W/").unwrap_or(s).trim_matches('"');
    s.parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request(format!("If-Match {s:?} is not a revision number")))
}

/// Replaces the document when the caller's revision (If-Match, else the
/// body's `revision`) is current; otherwise 409 with the current document.
async fn put_annotations(State(st): St, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let slide = st.slide(&id).ok_or_else(|| ApiError::not_found(format!("slide {id}")))?;
    let expected = if_match(&headers)?;
    let (mut new_doc, warnings) = AnnotationDocument::from_json_with_warnings(&body)?;
    if !new_doc.slide_id.is_empty() && new_doc.slide_id != id {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "schema",
            format!("document is for slide {:?}, not {id:?}", new_doc.slide_id),
        ));
    }
    let expected = expected.unwrap_or(new_doc.revision);
    let mut doc = slide.doc.lock().await;
    if expected != doc.revision {
        return Ok(doc_response(StatusCode::CONFLICT, &doc));
    }
    new_doc.slide_id = id.clone();
    new_doc.revision = doc.revision + 1;
    new_doc.modified_at = Some(chrono::Utc::now());
    let to_save = new_doc.clone();
    let data = st.data.clone();
    let sid = id.clone();
    blocking(move || data.save_doc(&sid, &to_save)).await?;
    *doc = new_doc;
    let mut resp = doc_response(StatusCode::OK, &doc);
    if !warnings.is_empty() {
        if let Ok(v) = HeaderValue::from_str(&warnings.join("; ")) {
            resp.headers_mut().insert("x-annotation-warnings", v);
        }
    }
    Ok(resp)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobRequest {
    slide_id: String,
    #[serde(default)]
    backend: Option<BackendConfig>,
    #[serde(default)]
    params: SegmentParams,
}

async fn submit_job(State(st): St, body: Bytes) -> ApiResult<Response> {
    let req: JobRequest = json_body(&body)?;
    req.params.validate()?;
    let backend = req.backend.unwrap_or_else(|| st.config.default_backend.clone());
    backend.validate()?;
    if let Some(names) = &req.params.layer_names {
        if names.len() + 1 < backend.classes() as usize {
            return Err(ApiError::bad_request(format!(
                "{} layer names for {} foreground classes",
                names.len(),
                backend.classes() - 1
            )));
        }
    }
    ready_slide(&st, &req.slide_id)?;
    let record = st
        .jobs
        .lock()
        .submit(&req.slide_id, req.params, backend)
        .map_err(|SubmitError::Busy(m)| ApiError::conflict(m))?;
    jobs::pump(&st);
    let location = format!("/api/jobs/{}", record.job_id);
    let mut resp = (StatusCode::ACCEPTED, Json(record)).into_response();
    resp.headers_mut()
        .insert(header::LOCATION, HeaderValue::from_str(&location).expect("ascii id"));
    Ok(resp)
}

async fn list_jobs(State(st): St) -> impl IntoResponse {
    Json(st.jobs.lock().list())
}

async fn get_job(State(st): St, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let job = st.jobs.lock().get(&id).ok_or_else(|| ApiError::not_found(format!("job {id}")))?;
    Ok(Json(job.snapshot()))
}

async fn timing_csv(State(st): St) -> ApiResult<Response> {
    let path = st.data.timing_path();
    let csv = {
        let _g = st.timing_lock.lock();
        std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?
    };
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsPair {
    slide_id: String,
    gt_layer: String,
    pred_layer: String,
    #[serde(default)]
    region: EvalRegion,
}

async fn pair_counts(st: &AppState, p: MetricsPair) -> ApiResult<slidekit::metrics::ConfusionCounts> {
    let (slide, pyr) = ready_slide(st, &p.slide_id)?;
    let doc = slide.doc.lock().await.clone();
    blocking(move || document_confusion(&doc, &p.gt_layer, &doc, &p.pred_layer, &pyr, p.region)).await
}

async fn post_metrics(State(st): St, body: Bytes) -> ApiResult<Json<MetricsReport>> {
    let p: MetricsPair = json_body(&body)?;
    Ok(Json(metrics(pair_counts(&st, p).await?)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsBatch {
    pairs: Vec<MetricsPair>,
}

async fn post_metrics_batch(State(st): St, body: Bytes) -> ApiResult<Json<MetricsReport>> {
    let b: MetricsBatch = json_body(&body)?;
    let mut counts = Vec::with_capacity(b.pairs.len());
    for p in b.pairs {
        counts.push(pair_counts(&st, p).await?);
    }
    Ok(Json(micro_average(&counts)?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportRequest {
    slide_ids: Vec<String>,
    layers: Vec<String>,
    #[serde(default)]
    patch_size: Option<u32>,
    #[serde(default)]
    background_ratio: f64,
    folder: String,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct ExportSummary {
    folder: String,
    manifest: String,
    patch_size: u32,
    class_names: Vec<String>,
    entries: usize,
    positives: usize,
    slide_ids: Vec<String>,
}

async fn training_export(State(st): St, body: Bytes) -> ApiResult<Json<ExportSummary>> {
    let req: ExportRequest = json_body(&body)?;
    if req.slide_ids.is_empty() {
        return Err(ApiError::bad_request("no slides selected"));
    }
    let out = st.data.training_dir(&req.folder)?;
    let mut inputs = Vec::new();
    for id in &req.slide_ids {
        let (slide, pyr) = ready_slide(&st, id)?;
        inputs.push((slide.doc.lock().await.clone(), pyr));
    }
    let opts = PatchExportOptions {
        patch_size: req.patch_size.unwrap_or(PatchExportOptions::default().patch_size),
        background_ratio: req.background_ratio,
        seed: req.seed,
        ..Default::default()
    };
    let layers = req.layers.clone();
    let manifest = blocking(move || {
        let pairs: Vec<(&AnnotationDocument, &SlidePyramid)> = inputs.iter().map(|(d, p)| (d, p.as_ref())).collect();
        let names: Vec<&str> = layers.iter().map(String::as_str).collect();
        export_training_patches(&pairs, &names, &opts, &out)
    })
    .await?;
    let mut slide_ids: Vec<String> = manifest.entries.iter().map(|e| e.slide_id.clone()).collect();
    slide_ids.sort();
    slide_ids.dedup();
    Ok(Json(ExportSummary {
        folder: manifest.folder.display().to_string(),
        manifest: manifest.folder.join(TrainingManifest::FILE_NAME).display().to_string(),
        patch_size: manifest.patch_size,
        class_names: manifest.class_names.clone(),
        entries: manifest.entries.len(),
        positives: manifest.positives(),
        slide_ids,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRequest {
    folder: String,
    #[serde(default)]
    backend: Option<BackendConfig>,
    #[serde(default)]
    hyperparams: TrainingHyperparams,
}

async fn training_train(State(st): St, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: TrainRequest = json_body(&body)?;
    let manifest = st.data.training_dir(&req.folder)?.join(TrainingManifest::FILE_NAME);
    if !manifest.exists() {
        return Err(ApiError::not_found(format!("no training manifest in {}", req.folder)));
    }
    let cfg = req.backend.unwrap_or_else(|| st.config.default_backend.clone());
    let hp = req.hyperparams;
    let model = blocking(move || Backend::from_config(&cfg)?.train(&manifest, &hp)).await?;
    Ok(Json(json!({"model": model.display().to_string()})))
}
