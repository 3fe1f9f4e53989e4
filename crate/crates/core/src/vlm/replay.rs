use std::sync::Mutex;

use super::{VlmBackend, VlmRequest};
use crate::error::{Error, Result};

/// Replays canned replies in order and records every prompt it receives.
/// Once the script is exhausted the last reply repeats.
pub struct ReplayVlm {
    replies: Vec<String>,
    sent: Mutex<Vec<String>>,
}

impl ReplayVlm {
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies,
            sent: Mutex::new(Vec::new()),
        }
    }

    pub fn constant(reply: &str) -> Self {
        Self::new(vec![reply.to_owned()])
    }

    /// Prompts received so far.
    pub fn requests(&self) -> Vec<String> {
        self.sent.lock().expect("replay log poisoned").clone()
    }
}

impl VlmBackend for ReplayVlm {
    fn id(&self) -> String {
        "replay".into()
    }

    fn generate(&self, request: &VlmRequest) -> Result<String> {
        let mut sent = self.sent.lock().expect("replay log poisoned");
        let i = sent.len();
        sent.push(request.prompt.clone());
        self.replies
            .get(i)
            .or(self.replies.last())
            .cloned()
            .ok_or_else(|| Error::Generation("replay script is empty".into()))
    }
}
