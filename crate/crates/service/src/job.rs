use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use exedit_core::pipeline::{EditOptions, Stage};
use serde::{Deserialize, Serialize};

/// Lifecycle of a job. The declaration order is the only legal order of
/// the non-terminal states; a job may end from any of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Captioning,
    Inverting,
    Capturing,
    Generating,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    /// States that report progress, in order.
    pub const STAGES: [JobState; 4] = [
        JobState::Captioning,
        JobState::Inverting,
        JobState::Capturing,
        JobState::Generating,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Captioning => "captioning",
            JobState::Inverting => "inverting",
            JobState::Capturing => "capturing",
            JobState::Generating => "generating",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Cancelled => "cancelled",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    /// Job state while a pipeline stage runs. Embedding belongs to
    /// captioning and decoding to generation.
    pub fn for_stage(stage: Stage) -> JobState {
        match stage {
            Stage::Captioning | Stage::Embedding => JobState::Captioning,
            Stage::Inverting => JobState::Inverting,
            Stage::Capturing => JobState::Capturing,
            Stage::Generating | Stage::Decoding => JobState::Generating,
        }
    }

    /// Whether moving from `self` to `next` keeps the state machine monotonic.
    pub fn can_advance_to(self, next: JobState) -> bool {
        if self.is_terminal() {
            return false;
        }
        match next {
            JobState::Queued => false,
            JobState::Done => self == JobState::Generating,
            JobState::Failed | JobState::Cancelled => true,
            stage => stage >= self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRefs {
    pub x: ImageRef,
    pub x_edit: ImageRef,
    pub y: ImageRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRequest {
    pub options: EditOptions,
    /// Edit weights to run. A plain edit has one entry, `options.lambda`.
    pub lambdas: Vec<f64>,
    pub sweep: bool,
    pub inputs: InputRefs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    /// File names inside the bundle.
    pub files: Vec<String>,
    pub caption: String,
    pub output_sha256: Vec<String>,
    pub bundle_url: String,
    pub expires_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEvent {
    pub state: JobState,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub state: JobState,
    pub request: JobRequest,
    pub result: Option<JobResult>,
    /// Fraction complete of each progress-reporting state.
    pub stage_progress: BTreeMap<JobState, f64>,
    pub error: Option<String>,
    pub cancel_requested: bool,
    /// Zero-based position among queued jobs, while queued.
    pub queue_position: Option<usize>,
    pub created_at_ms: u64,
    /// Every state entered, with its wall-clock time.
    pub events: Vec<JobEvent>,
}

impl Job {
    pub fn new(id: String, request: JobRequest) -> Self {
        let now = now_ms();
        Self {
            id,
            state: JobState::Queued,
            request,
            result: None,
            stage_progress: JobState::STAGES.iter().map(|&s| (s, 0.0)).collect(),
            error: None,
            cancel_requested: false,
            queue_position: None,
            created_at_ms: now,
            events: vec![JobEvent {
                state: JobState::Queued,
                at_ms: now,
            }],
        }
    }

    /// Moves to `next` if that keeps the state machine monotonic. Returns
    /// whether the state changed.
    pub fn advance(&mut self, next: JobState) -> bool {
        if next == self.state || !self.state.can_advance_to(next) {
            return false;
        }
        self.state = next;
        self.events.push(JobEvent { state: next, at_ms: now_ms() });
        true
    }

    pub fn event_time(&self, state: JobState) -> Option<u64> {
        self.events.iter().find(|e| e.state == state).map(|e| e.at_ms)
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
