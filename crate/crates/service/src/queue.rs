//! Job store and the single worker thread that owns the editor.

use std::collections::{HashMap, VecDeque};
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use exedit_core::image_ops::content_hash;
use exedit_core::pipeline::{
    write_bundle, write_sweep_bundle, EditOptions, EditResult, Editor, ExemplarTriplet, Stage, StageObserver,
};
use exedit_core::Error as CoreError;
use image::RgbImage;
use serde::Serialize;
use tracing::{error, info, warn};

use crate::config::ServiceConfig;
use crate::error::ServiceError;
use crate::job::{now_ms, ImageRef, InputRefs, Job, JobRequest, JobResult, JobState};

/// Builds the editor on the worker thread, so the HTTP side can come up
/// before the backbone has loaded.
pub type EditorLoader = Box<dyn FnOnce() -> exedit_core::Result<Arc<dyn Editor>> + Send>;

pub fn stub_loader() -> EditorLoader {
    Box::new(|| Ok(Arc::new(exedit_core::pipeline::StubEditor) as Arc<dyn Editor>))
}

/// A validated-on-submit edit request.
pub struct Submission {
    pub x: RgbImage,
    pub x_edit: RgbImage,
    pub y: RgbImage,
    pub options: EditOptions,
    /// `Some` for a sweep.
    pub lambdas: Option<Vec<f64>>,
}

impl Submission {
    fn request(&self) -> Result<JobRequest, ServiceError> {
        self.options.validate()?;
        let lambdas = match &self.lambdas {
            Some(l) if l.is_empty() => return Err(ServiceError::Validation("lambda list is empty".into())),
            Some(l) => l.clone(),
            None => vec![self.options.lambda],
        };
        if let Some(l) = lambdas.iter().find(|l| !l.is_finite()) {
            return Err(ServiceError::Validation(format!("lambda must be finite, got {l}")));
        }
        let image_ref = |img: &RgbImage, name: &str| {
            if img.width() == 0 || img.height() == 0 {
                return Err(ServiceError::Validation(format!("{name} is empty")));
            }
            Ok(ImageRef {
                sha256: content_hash(img),
                width: img.width(),
                height: img.height(),
            })
        };
        Ok(JobRequest {
            options: self.options,
            sweep: self.lambdas.is_some(),
            lambdas,
            inputs: InputRefs {
                x: image_ref(&self.x, "x")?,
                x_edit: image_ref(&self.x_edit, "x_edit")?,
                y: image_ref(&self.y, "y")?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub backbone_loaded: bool,
    pub backbone_id: Option<String>,
    pub queue_depth: usize,
    pub error: Option<String>,
}

struct Entry {
    job: Job,
    inputs: Option<Box<[RgbImage; 3]>>,
    finished: Option<Instant>,
    bundle_dir: Option<PathBuf>,
}

#[derive(Default)]
enum Backbone {
    #[default]
    Loading,
    Loaded(String),
    Failed(String),
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, Entry>,
    queue: VecDeque<String>,
    running: Option<String>,
    backbone: Backbone,
    shutdown: bool,
}

impl Inner {
    fn finish(&mut self, id: &str, state: JobState, error: Option<String>) {
        if self.running.as_deref() == Some(id) {
            self.running = None;
        }
        if let Some(e) = self.jobs.get_mut(id) {
            e.inputs = None;
            e.finished = Some(Instant::now());
            if state == JobState::Done {
                e.job.advance(JobState::Generating);
            }
            e.job.advance(state);
            e.job.error = error;
        }
    }
}

struct Shared {
    inner: Mutex<Inner>,
    wake: Condvar,
    config: ServiceConfig,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panic while holding the lock leaves plain data behind, still usable
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn expire(&self, inner: &mut Inner) -> usize {
        let ttl = self.config.result_ttl;
        let expired: Vec<String> = inner
            .jobs
            .iter()
            .filter(|(_, e)| e.finished.is_some_and(|t| t.elapsed() >= ttl))
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            if let Some(dir) = inner.jobs.remove(id).and_then(|e| e.bundle_dir) {
                if let Err(e) = std::fs::remove_dir_all(&dir) {
                    warn!(?dir, "could not remove expired bundle: {e}");
                }
            }
        }
        expired.len()
    }

    /// Blocks until a queued job is available, running retention sweeps
    /// while idle. `None` on shutdown.
    fn next_job(&self) -> Option<(String, JobRequest, Box<[RgbImage; 3]>)> {
        let tick = (self.config.result_ttl / 2).clamp(Duration::from_millis(10), Duration::from_secs(60));
        let mut inner = self.lock();
        loop {
            if inner.shutdown {
                return None;
            }
            while let Some(id) = inner.queue.pop_front() {
                let Some(entry) = inner.jobs.get_mut(&id) else { continue };
                if entry.job.state != JobState::Queued {
                    continue;
                }
                let inputs = entry.inputs.take().expect("queued job keeps its inputs");
                let request = entry.job.request.clone();
                inner.running = Some(id.clone());
                return Some((id, request, inputs));
            }
            self.expire(&mut inner);
            inner = self.wake.wait_timeout(inner, tick).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
}

/// FIFO job queue with one worker thread. Dropping it stops the worker
/// after the current stage.
pub struct JobQueue {
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

impl JobQueue {
    pub fn start(config: ServiceConfig, loader: EditorLoader) -> Self {
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner::default()),
            wake: Condvar::new(),
            config,
        });
        let worker_shared = shared.clone();
        let worker = std::thread::Builder::new()
            .name("exedit-worker".into())
            .spawn(move || worker_loop(worker_shared, loader))
            .expect("spawn worker thread");
        Self {
            shared,
            worker: Some(worker),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.shared.config
    }

    pub fn submit(&self, submission: Submission) -> Result<Job, ServiceError> {
        let request = submission.request()?;
        let mut inner = self.shared.lock();
        let cap = self.shared.config.queue_cap;
        if inner.queue.len() >= cap {
            return Err(ServiceError::QueueFull {
                cap,
                retry_after_secs: self.shared.config.retry_after_secs,
            });
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut job = Job::new(id.clone(), request);
        job.queue_position = Some(inner.queue.len());
        inner.jobs.insert(
            id.clone(),
            Entry {
                job: job.clone(),
                inputs: Some(Box::new([submission.x, submission.x_edit, submission.y])),
                finished: None,
                bundle_dir: None,
            },
        );
        inner.queue.push_back(id.clone());
        drop(inner);
        self.shared.wake.notify_all();
        info!(job = %id, "queued");
        Ok(job)
    }

    pub fn status(&self, id: &str) -> Result<Job, ServiceError> {
        let inner = self.shared.lock();
        let entry = inner.jobs.get(id).ok_or_else(|| ServiceError::NotFound(id.into()))?;
        let mut job = entry.job.clone();
        job.queue_position = inner.queue.iter().position(|q| q == id);
        Ok(job)
    }

    /// All known jobs, oldest first.
    pub fn list(&self) -> Vec<Job> {
        let inner = self.shared.lock();
        let mut jobs: Vec<Job> = inner.jobs.values().map(|e| e.job.clone()).collect();
        jobs.sort_by(|a, b| (a.created_at_ms, &a.id).cmp(&(b.created_at_ms, &b.id)));
        jobs
    }

    /// A queued job is cancelled immediately; a running one at its next
    /// stage boundary.
    pub fn cancel(&self, id: &str) -> Result<Job, ServiceError> {
        let mut inner = self.shared.lock();
        let inner = &mut *inner;
        let entry = inner.jobs.get_mut(id).ok_or_else(|| ServiceError::NotFound(id.into()))?;
        if entry.job.state.is_terminal() {
            return Err(ServiceError::Conflict(format!("job {id} is already {}", entry.job.state.as_str())));
        }
        entry.job.cancel_requested = true;
        if inner.running.as_deref() != Some(id) {
            inner.queue.retain(|q| q != id);
            inner.finish(id, JobState::Cancelled, None);
            info!(job = %id, "cancelled while queued");
        }
        Ok(inner.jobs[id].job.clone())
    }

    /// The finished job and the directory holding its bundle.
    pub fn result_dir(&self, id: &str) -> Result<(Job, PathBuf), ServiceError> {
        let inner = self.shared.lock();
        let entry = inner.jobs.get(id).ok_or_else(|| ServiceError::NotFound(id.into()))?;
        match (&entry.job.state, &entry.bundle_dir) {
            (JobState::Done, Some(dir)) => Ok((entry.job.clone(), dir.clone())),
            (state, _) => Err(ServiceError::Conflict(format!("job {id} is {}, not done", state.as_str()))),
        }
    }

    pub fn health(&self) -> Health {
        let inner = self.shared.lock();
        let (status, loaded, backbone_id, error) = match &inner.backbone {
            Backbone::Loading => ("loading", false, None, None),
            Backbone::Loaded(id) => ("ok", true, Some(id.clone()), None),
            Backbone::Failed(e) => ("error", false, None, Some(e.clone())),
        };
        Health {
            status,
            backbone_loaded: loaded,
            backbone_id,
            queue_depth: inner.queue.len(),
            error,
        }
    }

    /// Drops finished jobs older than the retention period. Returns how
    /// many were removed.
    pub fn expire(&self) -> usize {
        let mut inner = self.shared.lock();
        self.shared.expire(&mut inner)
    }
}

impl Drop for JobQueue {
    fn drop(&mut self) {
        let mut inner = self.shared.lock();
        inner.shutdown = true;
        if let Some(id) = inner.running.clone() {
            if let Some(e) = inner.jobs.get_mut(&id) {
                e.job.cancel_requested = true;
            }
        }
        drop(inner);
        self.shared.wake.notify_all();
        // the worker finishes on its own; joining could block for a whole stage
        drop(self.worker.take());
    }
}

struct JobObserver {
    shared: Arc<Shared>,
    id: String,
    lambdas: usize,
    generations_started: usize,
}

impl JobObserver {
    fn update(&self, f: impl FnOnce(&mut Job)) {
        if let Some(e) = self.shared.lock().jobs.get_mut(&self.id) {
            f(&mut e.job);
        }
    }
}

impl StageObserver for JobObserver {
    fn stage_started(&mut self, stage: Stage) -> exedit_core::Result<()> {
        let mut inner = self.shared.lock();
        let entry = inner.jobs.get_mut(&self.id).ok_or(CoreError::Cancelled)?;
        if entry.job.cancel_requested {
            return Err(CoreError::Cancelled);
        }
        entry.job.advance(JobState::for_stage(stage));
        if stage == Stage::Generating {
            self.generations_started += 1;
        }
        Ok(())
    }

    fn progress(&mut self, stage: Stage, fraction: f64) {
        let value = match stage {
            Stage::Embedding | Stage::Decoding => return,
            Stage::Generating => (self.generations_started.max(1) - 1) as f64 / self.lambdas as f64 + fraction / self.lambdas as f64,
            _ => fraction,
        };
        self.update(|job| {
            job.stage_progress.insert(JobState::for_stage(stage), value.clamp(0.0, 1.0));
        });
    }

    fn stage_finished(&mut self, stage: Stage, _seconds: f64) {
        let value = match stage {
            Stage::Embedding | Stage::Decoding => return,
            Stage::Generating => self.generations_started as f64 / self.lambdas as f64,
            _ => 1.0,
        };
        self.update(|job| {
            job.stage_progress.insert(JobState::for_stage(stage), value.clamp(0.0, 1.0));
        });
    }
}

fn worker_loop(shared: Arc<Shared>, loader: EditorLoader) {
    let editor = match std::panic::catch_unwind(AssertUnwindSafe(loader)) {
        Ok(Ok(editor)) => {
            info!(backbone = %editor.backbone_id(), "backbone loaded");
            shared.lock().backbone = Backbone::Loaded(editor.backbone_id());
            Some(editor)
        }
        Ok(Err(e)) => {
            error!("backbone failed to load: {e}");
            shared.lock().backbone = Backbone::Failed(e.to_string());
            None
        }
        Err(_) => {
            shared.lock().backbone = Backbone::Failed("backbone loader panicked".into());
            None
        }
    };
    while let Some((id, request, inputs)) = shared.next_job() {
        let Some(editor) = editor.as_deref() else {
            shared.lock().finish(&id, JobState::Failed, Some("backbone is not loaded".into()));
            continue;
        };
        let [x, x_edit, y] = *inputs;
        let triplet = ExemplarTriplet::new(id.clone(), x, x_edit, y);
        let mut observer = JobObserver {
            shared: shared.clone(),
            id: id.clone(),
            lambdas: request.lambdas.len(),
            generations_started: 0,
        };
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
            editor.sweep(&triplet, &request.lambdas, &request.options, &mut observer)
        }));
        match outcome {
            Ok(Ok(results)) => store_results(&shared, &id, &request, &results),
            Ok(Err(CoreError::Cancelled)) => {
                info!(job = %id, "cancelled");
                shared.lock().finish(&id, JobState::Cancelled, None);
            }
            Ok(Err(e)) => {
                warn!(job = %id, "failed: {e}");
                shared.lock().finish(&id, JobState::Failed, Some(e.to_string()));
            }
            Err(_) => {
                error!(job = %id, "editor panicked");
                shared.lock().finish(&id, JobState::Failed, Some("internal error: editor panicked".into()));
            }
        }
    }
}

fn store_results(shared: &Shared, id: &str, request: &JobRequest, results: &[EditResult]) {
    let dir = shared.config.results_dir.join(id);
    let written = if request.sweep {
        write_sweep_bundle(results, &dir)
    } else {
        write_bundle(&results[0], &dir)
    };
    let mut inner = shared.lock();
    match written {
        Ok(files) => {
            let ttl_ms = shared.config.result_ttl.as_millis() as u64;
            if let Some(e) = inner.jobs.get_mut(id) {
                e.bundle_dir = Some(dir);
                for p in e.job.stage_progress.values_mut() {
                    *p = 1.0;
                }
                e.job.result = Some(JobResult {
                    files: files
                        .iter()
                        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                        .collect(),
                    caption: results[0].caption().to_owned(),
                    output_sha256: results.iter().map(|r| r.provenance.output_sha256.clone()).collect(),
                    bundle_url: format!("/jobs/{id}/result"),
                    expires_at_ms: now_ms().saturating_add(ttl_ms),
                });
            }
            inner.finish(id, JobState::Done, None);
            info!(job = %id, "done");
        }
        Err(e) => inner.finish(id, JobState::Failed, Some(format!("writing the result bundle: {e}"))),
    }
}
