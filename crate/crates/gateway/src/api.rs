use chatmpc_core::session::{Frame, OutcomeReason};
use serde::{Deserialize, Serialize};

/// Version of the stream frame envelope.
pub const STREAM_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Created,
    Running,
    Paused,
    Finished { reason: OutcomeReason },
}

impl Status {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Created => "created",
            Self::Running => "running",
            Self::Paused => "paused",
            Self::Finished { .. } => "finished",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Start,
    Pause,
    Step,
    /// Fresh run from the original config; parameters reset too.
    Reset,
    /// Navigation only: restart from the start state keeping theta and eta.
    NextTrial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub status: Status,
    /// Unix time in milliseconds.
    pub created_at: u64,
    pub k: u64,
    pub trial: u32,
    /// Incremented by `reset` and `next_trial`; `k` restarts at 0 in a new run.
    pub run: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub schema: u32,
    pub run: u32,
    pub status: Status,
    pub frame: Frame,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlRequest {
    pub action: Action,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRequest {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}
