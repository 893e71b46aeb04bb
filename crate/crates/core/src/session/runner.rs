//! Closed-loop session: a fast control loop (MPPI + plant) and an
//! event-triggered personalization loop whose prompts are applied only at
//! step boundaries.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{NavSetup, ResolvedScenario, SessionConfig};
use super::log::{
    Header, LogRecord, LogWriter, Outcome, OutcomeReason, PlantState, PromptErrorRecord, PromptRecord, PromptSource,
    StepRecord, TimingSummary, TrajectoryLog, LOG_SCHEMA_VERSION,
};
use crate::cost::{cbf_value, nav_objective, CbfSpec, ObstacleDisc};
use crate::error::{InterpretError, SessionError};
use crate::interpreter::corpus::{load_corpus, BuiltinCorpus};
use crate::interpreter::update::{EtaState, ParamSpec, Theta, UpdateMode};
use crate::interpreter::{Interpreter, InterpreterConfig, Prompt};
use crate::mppi::{rollout, shift_warm_start, MppiSolver};
use crate::plant::{double_integrator_step, drive_step, DriveState, NavInput, NavState};
use crate::scenarios::{spawn_virtual_obstacles, DrivingScenario, VirtualObstacleSet};
use crate::users::{Observation, ScriptedUser};

enum Plant {
    Nav { setup: NavSetup, state: NavState },
    Drive { scenario: DrivingScenario, state: DriveState, virtual_set: VirtualObstacleSet },
}

/// Snapshot of a session published after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub k: u64,
    pub state: PlantState,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
    pub obstacles: Vec<FrameObstacle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_prompt: Option<PromptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObstacle {
    pub name: String,
    pub kind: ObstacleKind,
    pub disc: ObstacleDisc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    /// Known to the controller.
    Recognized,
    /// Ground truth only; shown to observers but never to the controller.
    Unrecognized,
    /// Created from a user report.
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepStatus {
    Running,
    Finished(Outcome),
}

pub struct Session {
    config: SessionConfig,
    plant: Plant,
    interpreter: Interpreter,
    solver: MppiSolver,
    nominal: Vec<f64>,
    user: ScriptedUser,
    trial: u32,
    k: u64,
    pending: VecDeque<String>,
    records: Vec<LogRecord>,
    writer: Option<LogWriter>,
    min_distance: BTreeMap<String, f64>,
    min_h: BTreeMap<String, f64>,
    outcome: Option<Outcome>,
    last_prompt: Option<PromptRecord>,
    last_diag: Option<(f64, f64)>,
    step_ms: Vec<f64>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("k", &self.k).field("trial", &self.trial).finish()
    }
}

/// Interpreter matching the scenario: barrier decay rates for navigation,
/// report counts `[a_LF, a_F, a_RF]` for driving.
pub fn build_interpreter(config: &SessionConfig, scenario: &ResolvedScenario) -> Result<Interpreter, SessionError> {
    let s = &config.interpreter;
    let (builtin, theta, eta, default_mode) = match scenario {
        ResolvedScenario::Navigation(n) => {
            let (lo, hi) = n.controller.theta_bounds;
            let theta = Theta::new(
                n.env.theta0.to_vec(),
                vec![ParamSpec::new("theta_vase", "", lo, hi), ParamSpec::new("theta_toy", "", lo, hi)],
            )?;
            let eta = EtaState::new(n.controller.eta0.to_vec(), n.controller.gamma.to_vec())?;
            (BuiltinCorpus::Navigation, theta, eta, UpdateMode::Multiplicative)
        }
        ResolvedScenario::Driving(_) => {
            let schema = ["a_LF", "a_F", "a_RF"].iter().map(|n| ParamSpec::new(n, "", 0.0, f64::INFINITY)).collect();
            let theta = Theta::new(vec![0.0; 3], schema)?;
            let eta = EtaState::new(vec![1.0; 3], vec![0.5; 3])?;
            (BuiltinCorpus::Driving, theta, eta, UpdateMode::Additive)
        }
    };
    let corpus = match &s.corpus {
        Some(path) => load_corpus(path)?,
        None => builtin.training(),
    };
    let icfg = InterpreterConfig {
        k: s.k,
        confidence_threshold: s.confidence_threshold,
        min_similarity: s.min_similarity,
        mode: s.mode.unwrap_or(default_mode),
    };
    if icfg.k == 0 {
        return Err(SessionError::Config { path: "interpreter.k".into(), message: "must be at least 1".into() });
    }
    Ok(Interpreter::from_config(&s.embedder, &corpus, theta, eta, icfg)?)
}

fn map_update_err(e: crate::error::UpdateError) -> SessionError {
    SessionError::Interpret(InterpretError::Update(e))
}

impl From<crate::error::UpdateError> for SessionError {
    fn from(e: crate::error::UpdateError) -> Self {
        map_update_err(e)
    }
}

impl Session {
    pub fn new(config: &SessionConfig) -> Result<Self, SessionError> {
        let scenario = config.resolve()?;
        let interpreter = build_interpreter(config, &scenario)?;
        Self::with_interpreter(config, interpreter)
    }

    /// Start a session that continues from an existing interpreter state.
    pub fn with_interpreter(config: &SessionConfig, interpreter: Interpreter) -> Result<Self, SessionError> {
        let scenario = config.resolve()?;
        let user = config.scripted_user(&scenario);
        let (plant, mppi, trial) = match &scenario {
            ResolvedScenario::Navigation(n) => {
                (Plant::Nav { setup: n.clone(), state: n.env.start }, n.controller.mppi.clone(), n.trial)
            }
            ResolvedScenario::Driving(d) => {
                let state = DriveState {
                    pose: d.start_pose,
                    speed: d.start_speed,
                    speed_loop: d.speed_loop,
                };
                let virtual_set = VirtualObstacleSet::new(d.virtual_radius, d.accumulation);
                (Plant::Drive { scenario: d.clone(), state, virtual_set }, d.mppi.clone(), 1)
            }
        };
        let solver = MppiSolver::new(mppi).map_err(|e| SessionError::Config { path: "scenario".into(), message: e.to_string() })?;
        let nominal = solver.config().zero_sequence();
        let writer = match &config.log {
            Some(p) => Some(LogWriter::create(p)?),
            None => None,
        };
        let mut s = Self {
            config: config.clone(),
            plant,
            solver,
            nominal,
            user,
            trial,
            k: 0,
            pending: VecDeque::new(),
            records: Vec::new(),
            writer,
            min_distance: BTreeMap::new(),
            min_h: BTreeMap::new(),
            outcome: None,
            last_prompt: None,
            last_diag: None,
            step_ms: Vec::new(),
            interpreter,
        };
        let header = Header {
            schema: LOG_SCHEMA_VERSION,
            config: config.canonical(),
            scenario: config.canonical().resolve()?,
            trial,
            initial_state: s.plant_state(),
            theta0: s.interpreter.theta().clone(),
            eta0: s.interpreter.eta().clone(),
            mode: s.interpreter.config().mode,
            embedder: s.interpreter.provider_name().to_string(),
        };
        s.push(LogRecord::Header(header))?;
        s.track_metrics();
        Ok(s)
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn trial(&self) -> u32 {
        self.trial
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn interpreter(&self) -> &Interpreter {
        &self.interpreter
    }

    pub fn into_interpreter(self) -> Interpreter {
        self.interpreter
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn log(&self) -> TrajectoryLog {
        TrajectoryLog { records: self.records.clone() }
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn plant_state(&self) -> PlantState {
        match &self.plant {
            Plant::Nav { state, .. } => PlantState::Nav(*state),
            Plant::Drive { state, .. } => PlantState::Drive(*state),
        }
    }

    pub fn virtual_obstacles(&self) -> Option<&VirtualObstacleSet> {
        match &self.plant {
            Plant::Drive { virtual_set, .. } => Some(virtual_set),
            Plant::Nav { .. } => None,
        }
    }

    fn push(&mut self, record: LogRecord) -> Result<(), SessionError> {
        if let Some(w) = &mut self.writer {
            w.append(&record)?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn frame(&self) -> Frame {
        let mut obstacles = Vec::new();
        match &self.plant {
            Plant::Nav { setup, .. } => {
                for (name, disc) in [("vase", setup.env.vase), ("toy", setup.env.toy)] {
                    obstacles.push(FrameObstacle { name: name.into(), kind: ObstacleKind::Recognized, disc });
                }
            }
            Plant::Drive { scenario, virtual_set, .. } => {
                obstacles.push(FrameObstacle {
                    name: "recognized".into(),
                    kind: ObstacleKind::Recognized,
                    disc: scenario.recognized,
                });
                obstacles.push(FrameObstacle {
                    name: "unrecognized".into(),
                    kind: ObstacleKind::Unrecognized,
                    disc: scenario.unrecognized,
                });
                for (i, v) in virtual_set.obstacles.iter().enumerate() {
                    obstacles.push(FrameObstacle { name: format!("virtual{i}"), kind: ObstacleKind::Virtual, disc: v.disc });
                }
            }
        }
        Frame {
            k: self.k,
            state: self.plant_state(),
            theta: self.interpreter.theta().values.clone(),
            eta: self.interpreter.eta().eta.clone(),
            obstacles,
            last_prompt: self.last_prompt.clone(),
            min_cost: self.last_diag.map(|d| d.0),
            weight_entropy: self.last_diag.map(|d| d.1),
            outcome: self.outcome.clone(),
        }
    }

    /// Queue a prompt for the next step boundary.
    pub fn enqueue_prompt(&mut self, text: impl Into<String>) {
        self.pending.push_back(text.into());
    }

    /// Interpret a prompt now. Call only between steps.
    pub fn apply_prompt(&mut self, text: &str, source: PromptSource) -> Result<PromptRecord, SessionError> {
        let theta_before = self.interpreter.theta().values.clone();
        let eta_before = self.interpreter.eta().eta.clone();
        let out = match self.interpreter.interpret(&Prompt::new(text, self.k)) {
            Ok(out) => out,
            Err(e) => {
                let rec = PromptErrorRecord { k: self.k, source, text: text.to_string(), error: e.to_string() };
                self.push(LogRecord::PromptError(rec))?;
                return Err(e.into());
            }
        };
        let mut virtual_obstacle = None;
        if out.applied {
            if let Plant::Drive { state, virtual_set, .. } = &mut self.plant {
                let next = spawn_virtual_obstacles(&state.pose, out.marker.as_slice(), virtual_set, self.k)?;
                virtual_obstacle = next.obstacles.last().cloned();
                *virtual_set = next;
            }
        }
        let rec = PromptRecord {
            tau: out.tau,
            k: self.k,
            source,
            text: out.text,
            marker: out.marker,
            confidence: out.confidence,
            top_similarity: out.top_similarity,
            applied: out.applied,
            theta_before,
            theta_after: out.theta_after,
            eta_before,
            eta_after: out.eta_after,
            virtual_obstacle,
        };
        self.push(LogRecord::Prompt(rec.clone()))?;
        self.last_prompt = Some(rec.clone());
        Ok(rec)
    }

    fn hidden_distance(&self) -> Option<f64> {
        match &self.plant {
            Plant::Drive { scenario, state, .. } => Some(scenario.unrecognized.center_distance(state.pose.position())),
            Plant::Nav { .. } => None,
        }
    }

    fn track_metrics(&mut self) {
        let upd = |map: &mut BTreeMap<String, f64>, name: &str, v: f64| {
            let e = map.entry(name.to_string()).or_insert(v);
            *e = e.min(v);
        };
        match &self.plant {
            Plant::Nav { setup, state } => {
                for (name, disc) in [("vase", &setup.env.vase), ("toy", &setup.env.toy)] {
                    upd(&mut self.min_distance, name, disc.center_distance(state.position()));
                    upd(&mut self.min_h, name, cbf_value(state, disc));
                }
            }
            Plant::Drive { scenario, state, .. } => {
                let p = state.pose.position();
                upd(&mut self.min_distance, "recognized", scenario.recognized.center_distance(p));
                upd(&mut self.min_distance, "unrecognized", scenario.unrecognized.center_distance(p));
            }
        }
    }

    /// Termination test on the current state.
    fn check_terminal(&self) -> Option<OutcomeReason> {
        match &self.plant {
            Plant::Nav { setup, state } => {
                for (name, disc) in [("vase", &setup.env.vase), ("toy", &setup.env.toy)] {
                    if cbf_value(state, disc) < 0.0 {
                        return Some(OutcomeReason::Collision { obstacle: name.into() });
                    }
                }
                let (x, y) = state.position();
                if x.hypot(y) < setup.goal_tolerance && state.speed() < setup.goal_tolerance {
                    return Some(OutcomeReason::Goal);
                }
            }
            Plant::Drive { scenario, state, .. } => {
                let p = state.pose.position();
                for (name, disc) in [("recognized", &scenario.recognized), ("unrecognized", &scenario.unrecognized)] {
                    if disc.center_distance(p) < disc.radius {
                        return Some(OutcomeReason::Collision { obstacle: name.into() });
                    }
                }
                let g = scenario.goal_center;
                if (p.0 - g.0).hypot(p.1 - g.1) <= scenario.goal_radius {
                    return Some(OutcomeReason::Goal);
                }
            }
        }
        None
    }

    fn finish(&mut self, reason: OutcomeReason) -> Result<Outcome, SessionError> {
        let outcome = Outcome {
            reason,
            steps: self.k,
            final_state: self.plant_state(),
            min_distance: self.min_distance.clone(),
            min_h: self.min_h.clone(),
        };
        self.push(LogRecord::Outcome(outcome.clone()))?;
        if self.config.timing {
            self.push(LogRecord::Diagnostics(TimingSummary::from_samples(&self.step_ms)))?;
        }
        self.outcome = Some(outcome.clone());
        Ok(outcome)
    }

    /// One control step: scripted and queued prompts, MPPI solve, plant update, log.
    pub fn step(&mut self) -> Result<StepStatus, SessionError> {
        if let Some(o) = &self.outcome {
            return Ok(StepStatus::Finished(o.clone()));
        }
        let obs = Observation { trial: self.trial, step: self.k, hidden_distance: self.hidden_distance() };
        while let Some(text) = self.user.next(&obs) {
            // errors are logged as prompt_error records and do not stop the loop
            let _ = self.apply_prompt(&text, PromptSource::Scripted);
        }
        while let Some(text) = self.pending.pop_front() {
            let _ = self.apply_prompt(&text, PromptSource::External);
        }

        let started = Instant::now();
        let result = self.advance();
        let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        let record = match result {
            Ok(r) => r,
            Err(message) => return Ok(StepStatus::Finished(self.finish(OutcomeReason::Aborted { message })?)),
        };
        self.step_ms.push(elapsed_ms);
        self.last_diag = Some((record.min_cost, record.weight_entropy));
        self.k += 1;
        self.push(LogRecord::Step(record))?;
        self.track_metrics();

        if let Some(reason) = self.check_terminal() {
            return Ok(StepStatus::Finished(self.finish(reason)?));
        }
        if self.k >= self.config.max_steps {
            return Ok(StepStatus::Finished(self.finish(OutcomeReason::MaxSteps)?));
        }
        Ok(StepStatus::Running)
    }

    fn advance(&mut self) -> Result<StepRecord, String> {
        let theta = self.interpreter.theta().values.clone();
        let k = self.k;
        match &mut self.plant {
            Plant::Nav { setup, state } => {
                let dt = setup.env.dt;
                let cbf = CbfSpec {
                    obstacles: vec![setup.env.vase, setup.env.toy],
                    theta,
                    penalty_weight: setup.controller.penalty_weight,
                };
                let step_fn = |s: &NavState, u: &[f64]| crate::plant::double_integrator_step_unchecked(s, u[0], u[1], dt);
                let cost_fn = |traj: &[NavState], u: &[f64]| nav_objective(traj, u, &cbf);
                let sol = self.solver.solve(&step_fn, &cost_fn, state, &self.nominal).map_err(|e| e.to_string())?;
                let plan = rollout(step_fn, state, &sol.sequence, 2).map_err(|e| e.to_string())?;
                let cost = cost_fn(&plan, &sol.sequence);
                let u = sol.first_input(2).to_vec();
                let next = double_integrator_step(state, &NavInput::new(u[0], u[1]), dt).map_err(|e| e.to_string())?;
                if !next.is_finite() {
                    return Err(format!("non-finite state at step {k}"));
                }
                *state = next;
                self.nominal = shift_warm_start(&sol.sequence, 2);
                Ok(StepRecord {
                    k,
                    input: u,
                    state: PlantState::Nav(next),
                    cost,
                    min_cost: sol.diagnostics.min_cost,
                    weight_entropy: sol.diagnostics.weight_entropy,
                })
            }
            Plant::Drive { scenario, state, virtual_set } => {
                let (dt, l) = (scenario.dt, scenario.wheelbase);
                let spec = scenario.controller_view(virtual_set);
                let step_fn = |s: &DriveState, u: &[f64]| drive_step(s, u[0], dt, l);
                let cost_fn = |traj: &[DriveState], _u: &[f64]| {
                    let pos: Vec<(f64, f64)> = traj[1..].iter().map(|s| s.pose.position()).collect();
                    spec.evaluate(&pos)
                };
                let sol = self.solver.solve(&step_fn, &cost_fn, state, &self.nominal).map_err(|e| e.to_string())?;
                let plan = rollout(step_fn, state, &sol.sequence, 1).map_err(|e| e.to_string())?;
                let cost = cost_fn(&plan, &sol.sequence);
                let delta = sol.first_input(1)[0];
                let next = drive_step(state, delta, dt, l);
                if !next.is_finite() {
                    return Err(format!("non-finite state at step {k}"));
                }
                *state = next;
                self.nominal = shift_warm_start(&sol.sequence, 1);
                Ok(StepRecord {
                    k,
                    input: vec![delta],
                    state: PlantState::Drive(next),
                    cost,
                    min_cost: sol.diagnostics.min_cost,
                    weight_entropy: sol.diagnostics.weight_entropy,
                })
            }
        }
    }

    /// Step until the session finishes.
    pub fn run_to_end(&mut self) -> Result<Outcome, SessionError> {
        loop {
            if let StepStatus::Finished(o) = self.step()? {
                return Ok(o);
            }
        }
    }
}

pub fn run_session(config: &SessionConfig) -> Result<TrajectoryLog, SessionError> {
    let mut s = Session::new(config)?;
    s.run_to_end()?;
    Ok(s.log())
}

/// Navigation protocol: `trials` sequential runs from the start state with
/// `theta` and `eta` carried over. Trial `i` uses trial index `i + 1`, and
/// `log_for` names each trial's log file.
pub fn run_trials(
    config: &SessionConfig,
    trials: u32,
    log_for: impl Fn(u32) -> Option<std::path::PathBuf>,
) -> Result<Vec<TrajectoryLog>, SessionError> {
    if trials == 0 {
        return Err(SessionError::Config { path: "trials".into(), message: "at least one trial".into() });
    }
    let mut logs = Vec::new();
    let mut interpreter: Option<Interpreter> = None;
    for t in 1..=trials {
        let mut cfg = config.clone();
        match &mut cfg.scenario {
            super::config::ScenarioConfig::Navigation(n) => n.trial = t,
            super::config::ScenarioConfig::Driving(_) => {
                return Err(SessionError::Config { path: "scenario".into(), message: "trials need a navigation scenario".into() })
            }
        }
        cfg.log = log_for(t);
        let mut s = match interpreter.take() {
            Some(i) => Session::with_interpreter(&cfg, i)?,
            None => Session::new(&cfg)?,
        };
        s.run_to_end()?;
        logs.push(s.log());
        interpreter = Some(s.into_interpreter());
    }
    Ok(logs)
}
