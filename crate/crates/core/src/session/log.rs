//! NDJSON trajectory log, schema version 1.
//!
//! One JSON object per line, tagged by `record`: a `header`, then `step` and
//! `prompt` records in execution order, an `outcome`, and optionally a
//! `diagnostics` record with wall-clock timing. Everything except
//! `diagnostics` is a deterministic function of the config and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ResolvedScenario, SessionConfig};
use crate::error::LogError;
use crate::interpreter::update::{apply_update, EtaState, Theta, UpdateMarker, UpdateMode};
use crate::plant::{DriveState, NavState};
use crate::scenarios::VirtualObstacle;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantState {
    Nav(NavState),
    Drive(DriveState),
}

impl PlantState {
    pub fn position(&self) -> (f64, f64) {
        match self {
            Self::Nav(s) => s.position(),
            Self::Drive(s) => s.pose.position(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub schema: u32,
    pub config: SessionConfig,
    pub scenario: ResolvedScenario,
    pub trial: u32,
    pub initial_state: PlantState,
    pub theta0: Theta,
    pub eta0: EtaState,
    pub mode: UpdateMode,
    pub embedder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: u64,
    /// Input applied at step `k`.
    pub input: Vec<f64>,
    /// State after the step, `x(k+1)`.
    pub state: PlantState,
    /// Cost of the returned plan.
    pub cost: f64,
    pub min_cost: f64,
    pub weight_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Scripted,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub tau: u64,
    pub k: u64,
    pub source: PromptSource,
    pub text: String,
    pub marker: UpdateMarker,
    pub confidence: f64,
    pub top_similarity: f64,
    pub applied: bool,
    pub theta_before: Vec<f64>,
    pub theta_after: Vec<f64>,
    pub eta_before: Vec<f64>,
    pub eta_after: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virtual_obstacle: Option<VirtualObstacle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptErrorRecord {
    pub k: u64,
    pub source: PromptSource,
    pub text: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeReason {
    Goal,
    Collision { obstacle: String },
    MaxSteps,
    Aborted { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub reason: OutcomeReason,
    /// Number of control steps executed.
    pub steps: u64,
    pub final_state: PlantState,
    /// Smallest center distance to each obstacle over the run.
    pub min_distance: BTreeMap<String, f64>,
    /// Smallest barrier value per obstacle (navigation only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub min_h: BTreeMap<String, f64>,
}

impl Outcome {
    pub fn is_collision(&self) -> bool {
        matches!(self.reason, OutcomeReason::Collision { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: u64,
    pub mean_step_ms: f64,
    pub std_step_ms: f64,
    pub max_step_ms: f64,
}

impl TimingSummary {
    pub fn from_samples(ms: &[f64]) -> Self {
        let n = ms.len().max(1) as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            steps: ms.len() as u64,
            mean_step_ms: mean,
            std_step_ms: var.sqrt(),
            max_step_ms: ms.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header(Header),
    Step(StepRecord),
    Prompt(PromptRecord),
    PromptError(PromptErrorRecord),
    Outcome(Outcome),
    Diagnostics(TimingSummary),
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }

    fn describe(&self) -> String {
        match self {
            Self::Header(_) => "header".into(),
            Self::Step(s) => format!("step k={}", s.k),
            Self::Prompt(p) => format!("prompt tau={}", p.tau),
            Self::PromptError(p) => format!("prompt_error k={}", p.k),
            Self::Outcome(_) => "outcome".into(),
            Self::Diagnostics(_) => "diagnostics".into(),
        }
    }

    pub fn is_diagnostics(&self) -> bool {
        matches!(self, Self::Diagnostics(_))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
}

impl TrajectoryLog {
    pub fn header(&self) -> Option<&Header> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Header(h) => Some(h),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Prompt(p) => Some(p),
            _ => None,
        })
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Outcome(o) => Some(o),
            _ => None,
        })
    }

    pub fn diagnostics(&self) -> Option<&TimingSummary> {
        self.records.iter().find_map(|r| match r {
            LogRecord::Diagnostics(d) => Some(d),
            _ => None,
        })
    }

    /// Initial state followed by every post-step state.
    pub fn states(&self) -> Vec<PlantState> {
        let mut out: Vec<PlantState> = self.header().map(|h| h.initial_state).into_iter().collect();
        out.extend(self.steps().map(|s| s.state));
        out
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// NDJSON without wall-clock records; equal for equal config and seed.
    pub fn to_ndjson_deterministic(&self) -> String {
        let mut out = String::new();
        for r in self.records.iter().filter(|r| !r.is_diagnostics()) {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Replays every applied prompt through the update rule and checks that
    /// the logged parameter transitions match exactly.
    pub fn verify_replay(&self) -> Result<(), LogError> {
        let h = self.header().ok_or(LogError::MissingHeader)?;
        let mut theta = h.theta0.clone();
        let mut eta = h.eta0.clone();
        for p in self.prompts() {
            let fail = |message: String| Err(LogError::Replay { tau: p.tau, message });
            if p.theta_before != theta.values || p.eta_before != eta.eta {
                return fail("state before the prompt differs from the replayed state".into());
            }
            if p.applied {
                let (t, e) = apply_update(h.mode, &theta, &eta, &p.marker)
                    .map_err(|e| LogError::Replay { tau: p.tau, message: e.to_string() })?;
                theta = t;
                eta = e;
            }
            if p.theta_after != theta.values || p.eta_after != eta.eta {
                return fail(format!("logged theta {:?} but replay gives {:?}", p.theta_after, theta.values));
            }
        }
        Ok(())
    }
}

/// Parse NDJSON text; blank lines are ignored.
pub fn parse_log(text: &str) -> Result<TrajectoryLog, LogError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                return Err(LogError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                    last_valid: records.last().map(LogRecord::describe),
                })
            }
        }
    }
    if !matches!(records.first(), Some(LogRecord::Header(_))) {
        return Err(LogError::MissingHeader);
    }
    Ok(TrajectoryLog { records })
}

pub fn read_log(path: &Path) -> Result<TrajectoryLog, LogError> {
    parse_log(&std::fs::read_to_string(path)?)
}

pub fn write_log(log: &TrajectoryLog, path: &Path) -> Result<(), LogError> {
    std::fs::write(path, log.to_ndjson())?;
    Ok(())
}

/// Streams records to a file as they are produced, one flushed line each.
pub struct LogWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        Ok(Self { out: std::io::BufWriter::new(std::fs::File::create(path)?) })
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), LogError> {
        self.out.write_all(record.to_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Plot data: one CSV row per state with the input applied from it.
pub fn trajectory_csv(log: &TrajectoryLog) -> String {
    let states = log.states();
    let inputs: Vec<&[f64]> = log.steps().map(|s| s.input.as_slice()).collect();
    let mut out = String::new();
    let nav = matches!(states.first(), Some(PlantState::Nav(_)));
    out.push_str(if nav { "k,x1,x2,v1,v2,u1,u2\n" } else { "k,x,y,phi,v,delta\n" });
    let fmt_u = |k: usize, n: usize| -> String {
        match inputs.get(k) {
            Some(u) => u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            None => vec![""; n].join(","),
        }
    };
    for (k, s) in states.iter().enumerate() {
        match s {
            PlantState::Nav(x) => {
                out.push_str(&format!("{k},{},{},{},{},{}\n", x.x1, x.x2, x.v1, x.v2, fmt_u(k, 2)))
            }
            PlantState::Drive(d) => out.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                d.pose.x,
                d.pose.y,
                d.pose.phi,
                d.speed,
                fmt_u(k, 1)
            )),
        }
    }
    out
}
