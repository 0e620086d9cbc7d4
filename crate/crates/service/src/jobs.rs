//! Segmentation job table and scheduler.
//!
//! At most one queued-or-running job per slide and at most `max_jobs`
//! running overall; queued jobs start in submission order.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use slidekit::backend::{Backend, BackendConfig};
use slidekit::pipeline::{segment_slide, SegmentParams, TimingRecord};
use tracing::{info, warn};

use crate::store::Slide;
use crate::AppState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub analyzed_pixels: u64,
    pub slide_pixels: u64,
    pub wall_seconds: f64,
    pub tile_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub slide_id: String,
    pub state: JobState,
    pub progress: Progress,
    pub submitted: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<JobTiming>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Layers merged into the slide's annotations on completion.
    #[serde(default)]
    pub layers: Vec<String>,
    pub params: SegmentParams,
    pub backend: BackendConfig,
}

pub struct Job {
    record: parking_lot::Mutex<JobRecord>,
    done: AtomicUsize,
    total: AtomicUsize,
}

impl Job {
    pub fn snapshot(&self) -> JobRecord {
        let mut r = self.record.lock().clone();
        if r.state == JobState::Running {
            r.progress = Progress {
                done: self.done.load(Ordering::Relaxed),
                total: self.total.load(Ordering::Relaxed),
            };
        }
        r
    }
}

#[derive(Default)]
pub struct JobTable {
    jobs: BTreeMap<u64, Arc<Job>>,
    queue: VecDeque<u64>,
    running: usize,
    next: u64,
}

#[derive(Debug)]
pub enum SubmitError {
    Busy(String),
}

impl JobTable {
    pub fn get(&self, job_id: &str) -> Option<Arc<Job>> {
        let n: u64 = job_id.strip_prefix('j')?.parse().ok()?;
        self.jobs.get(&n).cloned()
    }

    pub fn list(&self) -> Vec<JobRecord> {
        self.jobs.values().map(|j| j.snapshot()).collect()
    }

    fn active_for(&self, slide_id: &str) -> Option<String> {
        self.jobs.values().find_map(|j| {
            let r = j.record.lock();
            (r.slide_id == slide_id && matches!(r.state, JobState::Queued | JobState::Running)).then(|| r.job_id.clone())
        })
    }

    pub fn submit(&mut self, slide_id: &str, params: SegmentParams, backend: BackendConfig) -> Result<JobRecord, SubmitError> {
        if let Some(other) = self.active_for(slide_id) {
            return Err(SubmitError::Busy(format!("slide {slide_id} already has job {other}")));
        }
        self.next += 1;
        let n = self.next;
        let record = JobRecord {
            job_id: format!("j{n}"),
            slide_id: slide_id.to_string(),
            state: JobState::Queued,
            progress: Progress { done: 0, total: 0 },
            submitted: Utc::now(),
            timing: None,
            error: None,
            layers: Vec::new(),
            params,
            backend,
        };
        self.jobs.insert(
            n,
            Arc::new(Job {
                record: parking_lot::Mutex::new(record.clone()),
                done: AtomicUsize::new(0),
                total: AtomicUsize::new(0),
            }),
        );
        self.queue.push_back(n);
        Ok(record)
    }
}

/// Starts queued jobs while capacity allows.
pub fn pump(state: &Arc<AppState>) {
    let mut table = state.jobs.lock();
    while table.running < state.config.max_jobs {
        let Some(n) = table.queue.pop_front() else { break };
        let job = table.jobs[&n].clone();
        table.running += 1;
        job.record.lock().state = JobState::Running;
        let st = state.clone();
        tokio::task::spawn_blocking(move || {
            run_job(&st, &job);
            st.jobs.lock().running -= 1;
            pump(&st);
        });
    }
}

fn run_job(state: &Arc<AppState>, job: &Arc<Job>) {
    let (slide_id, params, backend_cfg) = {
        let r = job.record.lock();
        (r.slide_id.clone(), r.params.clone(), r.backend.clone())
    };
    let started = Utc::now();
    let clock = Instant::now();
    info!(job = %job.record.lock().job_id, slide = %slide_id, "job started");
    let slide = state.slide(&slide_id);
    let result = slide
        .as_ref()
        .ok_or_else(|| format!("slide {slide_id} disappeared"))
        .and_then(|s| execute(state, s, job, &params, &backend_cfg).map_err(|e| e.to_string()));

    // the timing lock orders finish times and CSV rows together
    let _timing = state.timing_lock.lock();
    let finished = Utc::now();
    let mut r = job.record.lock();
    r.progress = Progress {
        done: job.done.load(Ordering::Relaxed),
        total: job.total.load(Ordering::Relaxed),
    };
    match result {
        Ok((t, layers)) => {
            if let Err(e) = state.data.append_timing(&t) {
                warn!(error = %e, "could not append timing row");
            }
            r.timing = Some(JobTiming {
                started,
                finished,
                analyzed_pixels: t.analyzed_pixels,
                slide_pixels: t.slide_pixels,
                wall_seconds: t.wall_seconds,
                tile_count: t.tile_count,
            });
            r.layers = layers;
            r.state = JobState::Done;
            info!(job = %r.job_id, seconds = t.wall_seconds, "job done");
        }
        Err(e) => {
            let slide_pixels = slide.map(|s| {
                let i = s.snapshot();
                i.width as u64 * i.height as u64
            });
            r.timing = Some(JobTiming {
                started,
                finished,
                analyzed_pixels: 0,
                slide_pixels: slide_pixels.unwrap_or(0),
                wall_seconds: clock.elapsed().as_secs_f64(),
                tile_count: r.progress.done as u64,
            });
            warn!(job = %r.job_id, error = %e, "job failed");
            r.error = Some(e);
            r.state = JobState::Failed;
        }
    }
}

fn execute(
    state: &Arc<AppState>,
    slide: &Arc<Slide>,
    job: &Arc<Job>,
    params: &SegmentParams,
    backend_cfg: &BackendConfig,
) -> slidekit::Result<(TimingRecord, Vec<String>)> {
    let pyr = slide
        .pyramid
        .get()
        .cloned()
        .ok_or_else(|| slidekit::Error::InvalidParam("slide is not ready".into()))?;
    let backend = Backend::from_config(backend_cfg)?;
    let mut params = params.clone();
    if params.workers.is_none() {
        params.workers = state.config.workers;
    }
    let out = segment_slide(&pyr, &backend, &backend_cfg.class_names, &params, &|done, total| {
        job.total.store(total, Ordering::Relaxed);
        job.done.fetch_max(done, Ordering::Relaxed);
    })?;
    let mut doc = slide.doc.blocking_lock();
    // keep empty results out of the document unless they clear an earlier run
    let layers: Vec<_> = out
        .layers
        .into_iter()
        .filter(|l| !l.elements.is_empty() || doc.layer(&l.name).is_some())
        .collect();
    let merged = doc.merge_predictions(&layers)?;
    state.data.save_doc(&slide.id(), &merged)?;
    *doc = merged;
    Ok((out.timing, layers.into_iter().map(|l| l.name).collect()))
}
