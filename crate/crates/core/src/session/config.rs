//! Session configuration, read from TOML. Scenario overrides use the paper's
//! symbol names (`R`, `N`, `H`, `T`, `L`, `r`, ...).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::ObstacleDisc;
use crate::error::SessionError;
use crate::interpreter::embed::EmbedderConfig;
use crate::interpreter::update::UpdateMode;
use crate::plant::{NavState, SpeedLoopState, VehiclePose};
use crate::scenarios::{
    build_driving_scenario, build_nav_env, DrivingCaseId, DrivingScenario, NavControllerConfig, NavEnvId,
    NavEnvironment, VirtualAccumulation,
};
use crate::users::{ScheduledPrompt, ScriptedTrigger, ScriptedUser};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub interpreter: InterpreterSettings,
    #[serde(default)]
    pub user: UserConfig,
    /// NDJSON trajectory log destination.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    /// MPPI worker hint; results do not depend on it.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub workers: usize,
    /// Append a wall-clock diagnostics record at the end of the log.
    #[serde(default = "default_true")]
    pub timing: bool,
}

fn default_max_steps() -> u64 {
    300
}

fn default_true() -> bool {
    true
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

impl SessionConfig {
    pub fn navigation(env: NavEnvId) -> Self {
        Self::new(ScenarioConfig::Navigation(NavScenarioConfig { env, trial: 1, overrides: Default::default() }))
    }

    pub fn driving(case: DrivingCaseId) -> Self {
        let mut cfg =
            Self::new(ScenarioConfig::Driving(DrivingScenarioConfig { case, overrides: Default::default() }));
        cfg.max_steps = 1500;
        cfg
    }

    fn new(scenario: ScenarioConfig) -> Self {
        Self {
            seed: 0,
            max_steps: default_max_steps(),
            scenario,
            interpreter: Default::default(),
            user: Default::default(),
            log: None,
            workers: 0,
            timing: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SessionError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| SessionError::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| SessionError::Config { path: e.path().to_string(), message: e.inner().to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, SessionError> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("session config serializes")
    }

    /// Copy without the fields that do not influence the trajectory.
    pub fn canonical(&self) -> Self {
        Self { log: None, workers: 0, timing: false, ..self.clone() }
    }

    pub fn resolve(&self) -> Result<ResolvedScenario, SessionError> {
        let resolved = match &self.scenario {
            ScenarioConfig::Navigation(n) => ResolvedScenario::Navigation(n.resolve(self.seed, self.workers)?),
            ScenarioConfig::Driving(d) => ResolvedScenario::Driving(d.resolve(self.seed, self.workers)?),
        };
        if self.max_steps == 0 {
            return Err(SessionError::Config { path: "max_steps".into(), message: "must be at least 1".into() });
        }
        Ok(resolved)
    }

    /// The prompt schedule this session replays.
    pub fn scripted_user(&self, scenario: &ResolvedScenario) -> ScriptedUser {
        match &self.user {
            UserConfig::None => ScriptedUser::new(Vec::new()),
            UserConfig::Scenario => scenario.default_schedule(),
            UserConfig::Scripted { schedule } => ScriptedUser::new(schedule.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    Navigation(NavScenarioConfig),
    Driving(DrivingScenarioConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NavScenarioConfig {
    pub env: NavEnvId,
    /// 1-based trial index, matched by trial-triggered prompts.
    #[serde(default = "default_trial")]
    pub trial: u32,
    #[serde(default)]
    pub overrides: NavOverrides,
}

fn default_trial() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NavOverrides {
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vase: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<[f64; 4]>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Symmetric acceleration bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_tolerance: Option<f64>,
}

/// Fully resolved navigation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavSetup {
    pub env: NavEnvironment,
    pub controller: NavControllerConfig,
    /// Goal reached when both position and velocity norms fall below this.
    pub goal_tolerance: f64,
    pub trial: u32,
}

pub const NAV_GOAL_TOLERANCE: f64 = 0.3;

fn positive(path: &str, v: f64) -> Result<f64, SessionError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(SessionError::Config { path: path.into(), message: format!("must be positive, got {v}") })
    }
}

impl NavScenarioConfig {
    pub fn resolve(&self, seed: u64, workers: usize) -> Result<NavSetup, SessionError> {
        let o = &self.overrides;
        let p = "scenario.navigation.overrides";
        let mut env = build_nav_env(self.env);
        let mut ctrl = NavControllerConfig::default();
        if let Some(r) = o.r {
            let r = positive(&format!("{p}.R"), r)?;
            env.safety_margin = r;
            env.vase.radius = r;
            env.toy.radius = r;
        }
        if let Some(t) = o.theta0 {
            env.theta0 = t;
        }
        if let Some(dt) = o.dt {
            env.dt = positive(&format!("{p}.dt"), dt)?;
        }
        if let Some([x, y]) = o.vase {
            env.vase = ObstacleDisc::new(x, y, env.safety_margin);
        }
        if let Some([x, y]) = o.toy {
            env.toy = ObstacleDisc::new(x, y, env.safety_margin);
        }
        if let Some([a, b, c, d]) = o.start {
            env.start = NavState::new(a, b, c, d);
        }
        if let Some(e) = o.eta0 {
            ctrl.eta0 = e;
        }
        if let Some(g) = o.gamma {
            ctrl.gamma = g;
        }
        if let Some(n) = o.n {
            ctrl.mppi.n_samples = n;
        }
        if let Some(h) = o.h {
            ctrl.mppi.horizon = h;
        }
        if let Some(s) = o.sigma {
            ctrl.mppi.sigma = positive(&format!("{p}.sigma"), s)?;
        }
        if let Some(t) = o.t {
            ctrl.mppi.temperature = positive(&format!("{p}.T"), t)?;
        }
        if let Some(u) = o.u_max {
            let u = positive(&format!("{p}.u_max"), u)?;
            ctrl.mppi.input_min = vec![-u, -u];
            ctrl.mppi.input_max = vec![u, u];
        }
        if let Some(w) = o.penalty_weight {
            ctrl.penalty_weight = positive(&format!("{p}.penalty_weight"), w)?;
        }
        ctrl.mppi.seed = seed;
        ctrl.mppi.workers = workers;
        ctrl.mppi
            .validate()
            .map_err(|e| SessionError::Config { path: p.into(), message: e.to_string() })?;
        let goal_tolerance = positive(&format!("{p}.goal_tolerance"), o.goal_tolerance.unwrap_or(NAV_GOAL_TOLERANCE))?;
        if self.trial == 0 {
            return Err(SessionError::Config { path: "scenario.navigation.trial".into(), message: "trials count from 1".into() });
        }
        Ok(NavSetup { env, controller: ctrl, goal_tolerance, trial: self.trial })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivingScenarioConfig {
    pub case: DrivingCaseId,
    #[serde(default)]
    pub overrides: DrivingOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DrivingOverrides {
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ki: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max: Option<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Symmetric steering bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_obs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Baseline virtual obstacle radius.
    #[serde(rename = "r", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_radius: Option<f64>,
    /// Distance to the unrecognized obstacle at which the scripted report fires.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulation: Option<VirtualAccumulation>,
}

impl DrivingScenarioConfig {
    pub fn resolve(&self, seed: u64, workers: usize) -> Result<DrivingScenario, SessionError> {
        let o = &self.overrides;
        let p = "scenario.driving.overrides";
        let mut s = build_driving_scenario(self.case);
        let pos = |name: &str, v: f64| positive(&format!("{p}.{name}"), v);
        if let Some(v) = o.l {
            s.wheelbase = pos("L", v)?;
        }
        if let Some(v) = o.dt {
            s.dt = pos("dt", v)?;
        }
        let sl = s.speed_loop;
        let speed_loop = SpeedLoopState::new(
            o.kp.unwrap_or(sl.kp),
            o.ki.unwrap_or(sl.ki),
            o.v_target.unwrap_or(sl.v_target),
            o.v_max.unwrap_or(sl.v_max),
        )
        .map_err(|e| SessionError::Config { path: p.into(), message: e.to_string() })?;
        s.speed_loop = speed_loop;
        if let Some(v) = o.n {
            s.mppi.n_samples = v;
        }
        if let Some(v) = o.h {
            s.mppi.horizon = v;
        }
        if let Some(v) = o.sigma {
            s.mppi.sigma = pos("sigma", v)?;
        }
        if let Some(v) = o.t {
            s.mppi.temperature = pos("T", v)?;
        }
        if let Some(v) = o.delta_max {
            let v = pos("delta_max", v)?;
            s.mppi.input_min = vec![-v];
            s.mppi.input_max = vec![v];
        }
        if let Some(v) = o.w_obs {
            s.w_obs = pos("w_obs", v)?;
        }
        if let Some(v) = o.rho {
            s.rho = v;
        }
        if let Some(v) = o.r {
            s.virtual_radius = pos("r", v)?;
        }
        if let Some(v) = o.obstacle_radius {
            let v = pos("obstacle_radius", v)?;
            s.recognized.radius = v;
            s.unrecognized.radius = v;
        }
        if let Some(v) = o.goal_radius {
            s.goal_radius = pos("goal_radius", v)?;
        }
        if let Some(v) = o.trigger_distance {
            let v = pos("trigger_distance", v)?;
            let entries = s
                .prompt_schedule
                .entries()
                .iter()
                .map(|e| ScheduledPrompt { trigger: ScriptedTrigger::HiddenObstacleWithin(v), text: e.text.clone() })
                .collect();
            s.prompt_schedule = ScriptedUser::new(entries);
        }
        if let Some(v) = o.start_speed {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SessionError::Config { path: format!("{p}.start_speed"), message: "must be non-negative".into() });
            }
            s.start_speed = v;
        }
        if let Some(v) = o.accumulation {
            s.accumulation = v;
        }
        s.mppi.seed = seed;
        s.mppi.workers = workers;
        s.validate().map_err(|e| SessionError::Config { path: p.into(), message: e.to_string() })?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedScenario {
    Navigation(NavSetup),
    Driving(DrivingScenario),
}

impl ResolvedScenario {
    /// Navigation: the three-trial protocol. Driving: the case's obstacle report.
    pub fn default_schedule(&self) -> ScriptedUser {
        match self {
            Self::Navigation(_) => ScriptedUser::new(vec![
                ScheduledPrompt { trigger: ScriptedTrigger::Trial(2), text: "Separate from the vase.".into() },
                ScheduledPrompt {
                    trigger: ScriptedTrigger::Trial(3),
                    text: "You don't have to be so careful about the toy.".into(),
                },
            ]),
            Self::Driving(d) => d.prompt_schedule.clone(),
        }
    }

    pub fn start_pose(&self) -> Option<VehiclePose> {
        match self {
            Self::Navigation(_) => None,
            Self::Driving(d) => Some(d.start_pose),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpreterSettings {
    /// Defaults to multiplicative for navigation and additive for driving.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<UpdateMode>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default = "default_min_similarity")]
    pub min_similarity: f64,
    /// NDJSON corpus replacing the built-in one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
}

fn default_k() -> usize {
    3
}

fn default_threshold() -> f64 {
    0.5
}

fn default_min_similarity() -> f64 {
    0.2
}

impl Default for InterpreterSettings {
    fn default() -> Self {
        Self {
            mode: None,
            k: default_k(),
            confidence_threshold: default_threshold(),
            min_similarity: default_min_similarity(),
            corpus: None,
            embedder: EmbedderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserConfig {
    /// No scripted prompts; prompts may still arrive from outside.
    None,
    /// The scenario's own schedule.
    #[default]
    Scenario,
    Scripted { schedule: Vec<ScheduledPrompt> },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml() {
        let cfg = SessionConfig::from_toml("[scenario.navigation]\nenv = \"A\"\n").unwrap();
        assert_eq!(cfg, SessionConfig::navigation(NavEnvId::A));
        let r = cfg.resolve().unwrap();
        match r {
            ResolvedScenario::Navigation(n) => {
                assert_eq!(n.env.theta0, [0.4, 0.4]);
                assert_eq!(n.goal_tolerance, 0.3);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn paper_symbol_overrides() {
        let text = r#"
seed = 7
[scenario.driving]
case = "two"
[scenario.driving.overrides]
N = 100
H = 20
T = 2.0
L = 10.0
r = 5.0
trigger_distance = 30.0
[user]
kind = "none"
"#;
        let cfg = SessionConfig::from_toml(text).unwrap();
        let ResolvedScenario::Driving(d) = cfg.resolve().unwrap() else { panic!() };
        assert_eq!((d.mppi.n_samples, d.mppi.horizon, d.mppi.temperature, d.mppi.seed), (100, 20, 2.0, 7));
        assert_eq!((d.wheelbase, d.virtual_radius), (10.0, 5.0));
        assert_eq!(
            d.prompt_schedule.entries()[0].trigger,
            ScriptedTrigger::HiddenObstacleWithin(30.0)
        );
        assert!(cfg.scripted_user(&ResolvedScenario::Driving(d)).entries().is_empty());
    }

    #[test]
    fn unknown_field_reports_path() {
        let err = SessionConfig::from_toml("[scenario.navigation]\nenv = \"A\"\n[scenario.navigation.overrides]\nRR = 1.0\n")
            .unwrap_err();
        match err {
            SessionError::Config { path, .. } => assert_eq!(path, "scenario.navigation.overrides.RR"),
            e => panic!("{e}"),
        }
        let err = SessionConfig::from_json(r#"{"scenario":{"navigation":{"env":"C"}}}"#).unwrap_err();
        match err {
            SessionError::Config { path, .. } => assert_eq!(path, "scenario.navigation.env"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = SessionConfig::navigation(NavEnvId::B);
        if let ScenarioConfig::Navigation(n) = &mut cfg.scenario {
            n.overrides.sigma = Some(-1.0);
        }
        assert!(matches!(cfg.resolve(), Err(SessionError::Config { .. })));
        let mut cfg = SessionConfig::navigation(NavEnvId::B);
        cfg.max_steps = 0;
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = SessionConfig::driving(DrivingCaseId::One);
        cfg.user = UserConfig::Scripted {
            schedule: vec![ScheduledPrompt { trigger: ScriptedTrigger::Step(3), text: "obstacle ahead!".into() }],
        };
        let back = SessionConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn default_navigation_schedule() {
        let cfg = SessionConfig::navigation(NavEnvId::A);
        let r = cfg.resolve().unwrap();
        let u = cfg.scripted_user(&r);
        assert_eq!(u.entries().len(), 2);
        assert_eq!(u.entries()[0].text, "Separate from the vase.");
    }
}
