//! HTTP workbench service: slide upload and tile serving, segmentation jobs,
//! annotation load/save with revision checks, metrics, training export and
//! a timing log. Everything lives in one data directory.

mod api;
pub mod jobs;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::Router;
use serde::{Deserialize, Serialize};
use slidekit::backend::BackendConfig;
use slidekit::pyramid::{SlidePyramid, DEFAULT_CACHE_TILES};
use tracing::{info, warn};

use crate::jobs::JobTable;
use crate::store::{DataDir, Slide, SlideInfo, SlideStatus};

pub use api::router;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Jobs allowed to run at once across all slides.
    pub max_jobs: usize,
    /// Inference threads per job; all cores when `None`.
    pub workers: Option<usize>,
    /// Backend used by jobs that do not name one.
    pub default_backend: BackendConfig,
    pub max_upload_bytes: usize,
    pub cache_tiles: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            data_dir: PathBuf::from("data"),
            max_jobs: 1,
            workers: None,
            default_backend: BackendConfig::default(),
            max_upload_bytes: 2 << 30,
            cache_tiles: DEFAULT_CACHE_TILES,
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub data: DataDir,
    slides: parking_lot::RwLock<HashMap<String, Arc<Slide>>>,
    pub(crate) jobs: parking_lot::Mutex<JobTable>,
    pub(crate) timing_lock: parking_lot::Mutex<()>,
    next_slide: parking_lot::Mutex<u64>,
}

impl AppState {
    /// Opens the data directory and reloads slides and annotations from it.
    pub fn open(config: ServiceConfig) -> slidekit::Result<Arc<Self>> {
        if config.max_jobs == 0 {
            return Err(slidekit::Error::InvalidParam("max_jobs must be >= 1".into()));
        }
        if config.workers == Some(0) {
            return Err(slidekit::Error::InvalidParam("workers must be >= 1".into()));
        }
        let data = DataDir::open(&config.data_dir)?;
        let mut slides = HashMap::new();
        for mut info in data.load_slides()? {
            let pyramid = OnceLock::new();
            match info.status {
                SlideStatus::Ready => {
                    match SlidePyramid::open_with_cache(&data.pyramid_dir(&info.sha256, info.tile_size), config.cache_tiles) {
                        Ok(p) => {
                            let _ = pyramid.set(Arc::new(p.with_slide_id(info.id.clone())));
                        }
                        Err(e) => {
                            warn!(slide = %info.id, error = %e, "pyramid unreadable");
                            info.status = SlideStatus::Failed;
                            info.error = Some(e.to_string());
                        }
                    }
                }
                SlideStatus::Building => {
                    info.status = SlideStatus::Failed;
                    info.error = Some("pyramid build interrupted".into());
                    data.save_info(&info)?;
                }
                SlideStatus::Failed => {}
            }
            let doc = data.load_doc(&info.id)?;
            slides.insert(
                info.id.clone(),
                Arc::new(Slide {
                    info: parking_lot::Mutex::new(info),
                    pyramid,
                    doc: tokio::sync::Mutex::new(doc),
                }),
            );
        }
        info!(slides = slides.len(), dir = %config.data_dir.display(), "data directory opened");
        let next = slides.len() as u64;
        Ok(Arc::new(AppState {
            config,
            data,
            slides: parking_lot::RwLock::new(slides),
            jobs: parking_lot::Mutex::new(JobTable::default()),
            timing_lock: parking_lot::Mutex::new(()),
            next_slide: parking_lot::Mutex::new(next),
        }))
    }

    pub fn slide(&self, id: &str) -> Option<Arc<Slide>> {
        self.slides.read().get(id).cloned()
    }

    pub fn slides(&self) -> Vec<SlideInfo> {
        let mut v: Vec<SlideInfo> = self.slides.read().values().map(|s| s.snapshot()).collect();
        v.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        v
    }

    /// Registers a new slide record; ids are unique even for identical bytes.
    pub(crate) fn add_slide(&self, name: &str, sha: &str, tile_size: u32) -> slidekit::Result<Arc<Slide>> {
        let mut slides = self.slides.write();
        let mut next = self.next_slide.lock();
        let id = loop {
            *next += 1;
            let id = format!("s{}-{}", *next, &sha[..12]);
            if !slides.contains_key(&id) {
                break id;
            }
        };
        let info = SlideInfo {
            id: id.clone(),
            name: name.to_string(),
            status: SlideStatus::Building,
            sha256: sha.to_string(),
            tile_size,
            width: 0,
            height: 0,
            levels: 0,
            error: None,
            created_at: chrono::Utc::now(),
        };
        self.data.save_info(&info)?;
        let doc = slidekit::annotations::AnnotationDocument::new(&id);
        self.data.save_doc(&id, &doc)?;
        let slide = Arc::new(Slide {
            info: parking_lot::Mutex::new(info),
            pyramid: OnceLock::new(),
            doc: tokio::sync::Mutex::new(doc),
        });
        slides.insert(id, slide.clone());
        Ok(slide)
    }
}

pub fn app(config: ServiceConfig) -> slidekit::Result<Router> {
    Ok(router(AppState::open(config)?))
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> slidekit::Result<()> {
    let app = app(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| slidekit::Error::io(format!("binding {addr}"), e))?;
    info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| slidekit::Error::io("serving", e))
}
