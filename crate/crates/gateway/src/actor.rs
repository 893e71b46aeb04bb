//! One thread per session. The thread owns the `Session`; handlers reach it
//! only through the command queue, so every mutation lands between steps.

use std::sync::mpsc::{self, RecvTimeoutError, TryRecvError};
use std::time::{Duration, Instant};

use chatmpc_core::error::SessionError;
use chatmpc_core::session::log::{PromptRecord, PromptSource};
use chatmpc_core::session::{ScenarioConfig, Session, SessionConfig, StepStatus, TrajectoryLog};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot, watch};

use crate::api::{Action, SessionHandle, Status, StreamFrame, STREAM_SCHEMA};

pub const STREAM_BUFFER: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlError {
    /// The action is not allowed in the current status.
    Illegal(String),
    /// The session could not be rebuilt.
    Failed(String),
}

pub enum Command {
    Control(Action, oneshot::Sender<Result<SessionHandle, ControlError>>),
    Prompt(String, oneshot::Sender<Result<PromptRecord, SessionError>>),
    Handle(oneshot::Sender<SessionHandle>),
    Trajectory(oneshot::Sender<TrajectoryLog>),
    Shutdown,
}

/// Channels a handler needs to talk to one session.
#[derive(Clone)]
pub struct SessionLink {
    pub commands: mpsc::Sender<Command>,
    pub frames: broadcast::Sender<StreamFrame>,
    pub latest: watch::Receiver<StreamFrame>,
}

struct Actor {
    id: String,
    created_at: u64,
    config: SessionConfig,
    /// `None` only while a trial restart moves the interpreter across.
    session: Option<Session>,
    status: Status,
    run: u32,
    period: Option<Duration>,
    due: Instant,
    frames: broadcast::Sender<StreamFrame>,
    latest: watch::Sender<StreamFrame>,
}

/// Step period for a pacing multiplier; `speed <= 0` runs unpaced.
pub fn step_period(config: &SessionConfig, speed: f64) -> Result<Option<Duration>, SessionError> {
    if !(speed > 0.0) || !speed.is_finite() {
        return Ok(None);
    }
    let dt = match config.resolve()? {
        chatmpc_core::session::ResolvedScenario::Navigation(n) => n.env.dt,
        chatmpc_core::session::ResolvedScenario::Driving(d) => d.dt,
    };
    Ok(Some(Duration::from_secs_f64(dt / speed)))
}

pub fn spawn(id: String, created_at: u64, config: SessionConfig, speed: f64) -> Result<SessionLink, SessionError> {
    let session = Session::new(&config)?;
    let period = step_period(&config, speed)?;
    let (frames, _) = broadcast::channel(STREAM_BUFFER);
    let first = StreamFrame { schema: STREAM_SCHEMA, run: 0, status: Status::Created, frame: session.frame() };
    let (latest_tx, latest) = watch::channel(first);
    let (commands, rx) = mpsc::channel();
    let actor = Actor {
        id,
        created_at,
        config,
        session: Some(session),
        status: Status::Created,
        run: 0,
        period,
        due: Instant::now(),
        frames: frames.clone(),
        latest: latest_tx,
    };
    std::thread::Builder::new()
        .name(format!("session-{}", actor.id))
        .spawn(move || actor.run(rx))
        .map_err(SessionError::Io)?;
    Ok(SessionLink { commands, frames, latest })
}

impl Actor {
    fn session(&self) -> &Session {
        self.session.as_ref().expect("session present")
    }

    fn session_mut(&mut self) -> &mut Session {
        self.session.as_mut().expect("session present")
    }

    fn handle(&self) -> SessionHandle {
        SessionHandle {
            id: self.id.clone(),
            status: self.status.clone(),
            created_at: self.created_at,
            k: self.session().k(),
            trial: self.session().trial(),
            run: self.run,
        }
    }

    fn publish(&self) {
        let f = StreamFrame { schema: STREAM_SCHEMA, run: self.run, status: self.status.clone(), frame: self.session().frame() };
        // latest first: a client that sees a frame on the stream and then
        // reconnects must not get an older one
        self.latest.send_replace(f.clone());
        // no subscribers is fine
        let _ = self.frames.send(f);
    }

    fn step(&mut self) {
        match self.session_mut().step() {
            Ok(StepStatus::Running) => {}
            Ok(StepStatus::Finished(o)) => self.status = Status::Finished { reason: o.reason },
            Err(e) => {
                self.status = Status::Finished {
                    reason: chatmpc_core::session::OutcomeReason::Aborted { message: e.to_string() },
                }
            }
        }
        self.publish();
    }

    fn restart(&mut self, next_trial: bool) -> Result<(), ControlError> {
        let mut cfg = self.config.clone();
        let session = if next_trial {
            let ScenarioConfig::Navigation(n) = &mut cfg.scenario else {
                return Err(ControlError::Illegal("next_trial needs a navigation scenario".into()));
            };
            n.trial = self.session().trial() + 1;
            let old = self.session.take().expect("session present");
            let trial = old.trial();
            let interpreter = old.into_interpreter();
            match Session::with_interpreter(&cfg, interpreter) {
                Ok(s) => s,
                Err(e) => {
                    // interpreter is gone; fall back to a fresh session
                    self.session = Some(Session::new(&self.config).map_err(|e| ControlError::Failed(e.to_string()))?);
                    return Err(ControlError::Failed(format!("trial {} failed to start: {e}", trial + 1)));
                }
            }
        } else {
            if let ScenarioConfig::Navigation(n) = &mut cfg.scenario {
                n.trial = match &self.config.scenario {
                    ScenarioConfig::Navigation(orig) => orig.trial,
                    ScenarioConfig::Driving(_) => 1,
                };
            }
            Session::new(&cfg).map_err(|e| ControlError::Failed(e.to_string()))?
        };
        self.session = Some(session);
        self.status = Status::Created;
        self.run += 1;
        self.publish();
        Ok(())
    }

    fn control(&mut self, action: Action) -> Result<SessionHandle, ControlError> {
        let illegal = |s: &Status| Err(ControlError::Illegal(format!("cannot {action:?} a {} session", s.name())));
        match (action, &self.status) {
            (Action::Start, Status::Created | Status::Paused) => {
                self.status = Status::Running;
                self.due = Instant::now();
                self.publish_status();
            }
            (Action::Pause, Status::Running) => {
                self.status = Status::Paused;
                self.publish_status();
            }
            (Action::Step, Status::Created | Status::Paused) => {
                self.status = Status::Paused;
                self.step();
            }
            (Action::Reset, _) => self.restart(false)?,
            (Action::NextTrial, Status::Finished { .. }) => self.restart(true)?,
            (_, s) => return illegal(s),
        }
        Ok(self.handle())
    }

    /// Status changes without a step refresh the latest frame only, so
    /// streamed `k` stays strictly increasing.
    fn publish_status(&self) {
        let mut f = self.latest.borrow().clone();
        f.status = self.status.clone();
        self.latest.send_replace(f);
    }

    fn dispatch(&mut self, cmd: Command) -> bool {
        match cmd {
            Command::Control(a, reply) => {
                let _ = reply.send(self.control(a));
            }
            Command::Prompt(text, reply) => {
                let r = match self.status {
                    Status::Running | Status::Paused => self.session_mut().apply_prompt(&text, PromptSource::External),
                    _ => Err(SessionError::Config {
                        path: "status".into(),
                        message: format!("prompts need a running or paused session, not {}", self.status.name()),
                    }),
                };
                let _ = reply.send(r);
            }
            Command::Handle(reply) => {
                let _ = reply.send(self.handle());
            }
            Command::Trajectory(reply) => {
                let _ = reply.send(self.session().log());
            }
            Command::Shutdown => return false,
        }
        true
    }

    fn run(mut self, rx: mpsc::Receiver<Command>) {
        loop {
            // commands first; a running session steps when its slot is due
            loop {
                let cmd = if self.status == Status::Running {
                    let wait = self.due.saturating_duration_since(Instant::now());
                    if wait.is_zero() {
                        match rx.try_recv() {
                            Ok(c) => c,
                            Err(TryRecvError::Empty) => break,
                            Err(TryRecvError::Disconnected) => return,
                        }
                    } else {
                        match rx.recv_timeout(wait) {
                            Ok(c) => c,
                            Err(RecvTimeoutError::Timeout) => break,
                            Err(RecvTimeoutError::Disconnected) => return,
                        }
                    }
                } else {
                    match rx.recv() {
                        Ok(c) => c,
                        Err(_) => return,
                    }
                };
                if !self.dispatch(cmd) {
                    return;
                }
            }
            if self.status == Status::Running {
                self.step();
                if let Some(p) = self.period {
                    // fall behind rather than burst when a step overruns
                    self.due = (self.due + p).max(Instant::now());
                }
            }
        }
    }
}
