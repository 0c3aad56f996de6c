//! Human approval of tool calls.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// What a UI or terminal needs to show to let a human decide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub call_id: String,
    pub tool_name: String,
    /// Pretty-printed JSON arguments.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalDecision {
    pub call_id: String,
    pub approved: bool,
    pub decider: String,
    pub at: DateTime<Utc>,
}

impl ApprovalDecision {
    pub fn new(call_id: &str, approved: bool, decider: &str) -> Self {
        ApprovalDecision {
            call_id: call_id.into(),
            approved,
            decider: decider.into(),
            at: Utc::now(),
        }
    }
}

/// Source of approval decisions. Implementations may block.
pub trait ApprovalSource: Send + Sync {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision;
}

pub struct AutoApprove;

impl ApprovalSource for AutoApprove {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        ApprovalDecision::new(&request.call_id, true, "auto")
    }
}

pub struct DenyAll;

impl ApprovalSource for DenyAll {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        ApprovalDecision::new(&request.call_id, false, "deny-all")
    }
}

/// Replays a fixed list of yes/no answers; denies once exhausted.
#[derive(Default)]
pub struct ScriptedApprovals {
    answers: Mutex<VecDeque<bool>>,
    seen: Mutex<Vec<ApprovalRequest>>,
}

impl ScriptedApprovals {
    pub fn new(answers: impl IntoIterator<Item = bool>) -> Self {
        ScriptedApprovals {
            answers: Mutex::new(answers.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ApprovalRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ApprovalSource for ScriptedApprovals {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        self.seen.lock().unwrap().push(request.clone());
        let approved = self.answers.lock().unwrap().pop_front().unwrap_or(false);
        ApprovalDecision::new(&request.call_id, approved, "script")
    }
}

type Notifier = Arc<dyn Fn(&ApprovalRequest) + Send + Sync>;

/// Approvals decided asynchronously by another thread (HTTP handler, UI).
///
/// `decide` registers the request, notifies the listener and blocks until
/// [`ChannelApprovals::resolve`] is called for the same call id. With a
/// timeout set (headless mode) an undecided call is denied when it expires.
pub struct ChannelApprovals {
    pending: Mutex<HashMap<String, Sender<(bool, String)>>>,
    timeout: Option<Duration>,
    notify: Option<Notifier>,
}

pub const HEADLESS_APPROVAL_TIMEOUT: Duration = Duration::from_secs(300);

impl ChannelApprovals {
    pub fn new(timeout: Option<Duration>) -> Self {
        ChannelApprovals {
            pending: Mutex::new(HashMap::new()),
            timeout,
            notify: None,
        }
    }

    pub fn on_request(mut self, notify: impl Fn(&ApprovalRequest) + Send + Sync + 'static) -> Self {
        self.notify = Some(Arc::new(notify));
        self
    }

    pub fn pending_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.pending.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Delivers a decision. Returns false if no call with that id is waiting.
    pub fn resolve(&self, call_id: &str, approved: bool, decider: &str) -> bool {
        match self.pending.lock().unwrap().remove(call_id) {
            Some(tx) => tx.send((approved, decider.to_string())).is_ok(),
            None => false,
        }
    }
}

impl ApprovalSource for ChannelApprovals {
    fn decide(&self, request: &ApprovalRequest) -> ApprovalDecision {
        let (tx, rx) = mpsc::channel();
        self.pending.lock().unwrap().insert(request.call_id.clone(), tx);
        if let Some(notify) = &self.notify {
            notify(request);
        }
        let outcome = match self.timeout {
            Some(t) => rx.recv_timeout(t),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match outcome {
            Ok((approved, decider)) => ApprovalDecision::new(&request.call_id, approved, &decider),
            Err(_) => {
                self.pending.lock().unwrap().remove(&request.call_id);
                ApprovalDecision::new(&request.call_id, false, "timeout")
            }
        }
    }
}
