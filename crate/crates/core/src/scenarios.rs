//! Experiment definitions: the two navigation environments and the two
//! driving cases with chat-reported virtual obstacles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cost::{DrivingCostSpec, ObstacleDisc};
use crate::error::ScenarioError;
use crate::mppi::MppiConfig;
use crate::plant::{NavState, SpeedLoopState, VehiclePose};
use crate::users::{ScheduledPrompt, ScriptedTrigger, ScriptedUser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NavEnvId {
    A,
    B,
}

impl std::str::FromStr for NavEnvId {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" | "NAV-A" => Ok(Self::A),
            "B" | "NAV-B" => Ok(Self::B),
            _ => Err(ScenarioError::UnknownScenario(s.to_string())),
        }
    }
}

/// Double-integrator navigation task: reach the origin past a vase and a toy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavEnvironment {
    pub id: NavEnvId,
    pub vase: ObstacleDisc,
    pub toy: ObstacleDisc,
    pub start: NavState,
    /// Safety margin `R` shared by both obstacles.
    pub safety_margin: f64,
    /// Initial barrier decay parameters `[theta_vase, theta_toy]`.
    pub theta0: [f64; 2],
    pub dt: f64,
}

impl NavEnvironment {
    /// Goal position; always the origin.
    pub const GOAL: (f64, f64) = (0.0, 0.0);

    pub fn obstacles(&self) -> [ObstacleDisc; 2] {
        [self.vase, self.toy]
    }
}

pub fn build_nav_env(id: NavEnvId) -> NavEnvironment {
    const R: f64 = 0.5;
    match id {
        NavEnvId::A => NavEnvironment {
            id,
            vase: ObstacleDisc::new(-1.0, -3.0, R),
            toy: ObstacleDisc::new(-3.0, -1.0, R),
            start: NavState::new(-5.0, -5.0, 0.0, 0.0),
            safety_margin: R,
            theta0: [0.4, 0.4],
            dt: 0.2,
        },
        NavEnvId::B => NavEnvironment {
            id,
            vase: ObstacleDisc::new(-1.0, -4.0, R),
            toy: ObstacleDisc::new(1.5, -3.0, R),
            start: NavState::new(0.0, -10.0, 0.0, 0.0),
            safety_margin: R,
            theta0: [0.4, 0.4],
            dt: 0.2,
        },
    }
}

/// Sampling and penalty settings of the navigation controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavControllerConfig {
    pub mppi: MppiConfig,
    pub penalty_weight: f64,
    /// Initial update sizes for `[theta_vase, theta_toy]`.
    pub eta0: [f64; 2],
    pub gamma: [f64; 2],
    /// Admissible interval for each barrier decay parameter.
    pub theta_bounds: (f64, f64),
}

impl Default for NavControllerConfig {
    fn default() -> Self {
        Self {
            mppi: MppiConfig {
                n_samples: 800,
                horizon: 10,
                input_min: vec![-2.0, -2.0],
                input_max: vec![2.0, 2.0],
                sigma: 0.5,
                temperature: 10.0,
                seed: 0,
                workers: 0,
            },
            penalty_weight: 1e4,
            eta0: [2.0, 2.0],
            gamma: [0.5, 0.5],
            theta_bounds: (1e-3, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrivingCaseId {
    One,
    Two,
}

impl std::str::FromStr for DrivingCaseId {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "drive-1" | "one" => Ok(Self::One),
            "2" | "drive-2" | "two" => Ok(Self::Two),
            _ => Err(ScenarioError::UnknownScenario(s.to_string())),
        }
    }
}

/// How repeated reports in the same direction grow the virtual obstacle set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VirtualAccumulation {
    /// New disc at the current anchor with radius `r * a_i`.
    #[default]
    GrowRadius,
    /// New disc of radius `r` at the current anchor.
    UnitDisc,
}

/// Semi-autonomous driving case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingScenario {
    pub id: DrivingCaseId,
    pub start_pose: VehiclePose,
    pub start_speed: f64,
    pub goal_center: (f64, f64),
    pub goal_radius: f64,
    pub recognized: ObstacleDisc,
    /// Ground truth only: never handed to the controller.
    pub unrecognized: ObstacleDisc,
    pub prompt_schedule: ScriptedUser,
    pub dt: f64,
    pub wheelbase: f64,
    pub speed_loop: SpeedLoopState,
    pub mppi: MppiConfig,
    pub w_obs: f64,
    pub rho: f64,
    /// Baseline virtual obstacle radius `r`.
    pub virtual_radius: f64,
    pub accumulation: VirtualAccumulation,
}

pub const DRIVING_OBSTACLE_RADIUS: f64 = 3.0;

pub fn build_driving_scenario(id: DrivingCaseId) -> DrivingScenario {
    let (start, heading_deg, prompt, trigger) = match id {
        DrivingCaseId::One => ((106.0, 85.0), -90.0, "obstacle in front!", 22.0),
        DrivingCaseId::Two => {
            ((104.0, 85.0), -120.0, "an obstacle is present in the right frontal area.", 12.0)
        }
    };
    DrivingScenario {
        id,
        start_pose: VehiclePose::new(start.0, start.1, heading_deg * PI / 180.0),
        start_speed: 0.0,
        goal_center: (106.0, -25.0),
        goal_radius: 3.0,
        recognized: ObstacleDisc::new(107.0, 65.0, DRIVING_OBSTACLE_RADIUS),
        unrecognized: ObstacleDisc::new(105.0, 22.0, DRIVING_OBSTACLE_RADIUS),
        prompt_schedule: ScriptedUser::new(vec![ScheduledPrompt {
            trigger: ScriptedTrigger::HiddenObstacleWithin(trigger),
            text: prompt.to_string(),
        }]),
        dt: 0.04,
        wheelbase: 13.90,
        speed_loop: SpeedLoopState { integrator: 0.0, kp: 0.5, ki: 0.1, v_target: 8.0, v_max: 15.0 },
        mppi: MppiConfig {
            n_samples: 500,
            horizon: 50,
            input_min: vec![-1.0],
            input_max: vec![1.0],
            sigma: 0.5,
            temperature: 1.0,
            seed: 0,
            workers: 0,
        },
        w_obs: 1000.0,
        rho: 0.99,
        virtual_radius: 4.0,
        accumulation: VirtualAccumulation::GrowRadius,
    }
}

impl DrivingScenario {
    /// Cost inputs visible to the controller: recognized obstacle plus virtual discs.
    pub fn controller_view(&self, virtual_set: &VirtualObstacleSet) -> DrivingCostSpec {
        DrivingCostSpec {
            goal_center: self.goal_center,
            goal_radius: self.goal_radius,
            recognized: vec![self.recognized],
            virtual_discs: virtual_set.discs(),
            w_obs: self.w_obs,
            rho: self.rho,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidParameter(m.to_string()));
        if !(self.goal_radius > 0.0) {
            return bad("goal_radius must be positive");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho must lie in (0, 1]");
        }
        if !(self.w_obs > 0.0) {
            return bad("w_obs must be positive");
        }
        if !(self.wheelbase > 0.0) {
            return bad("wheelbase must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.virtual_radius > 0.0) {
            return bad("virtual obstacle radius must be positive");
        }
        self.mppi.validate().map_err(|e| ScenarioError::InvalidParameter(e.to_string()))
    }
}

/// Reference points ahead of the vehicle used to place virtual obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPoints {
    pub lf: (f64, f64),
    pub f: (f64, f64),
    pub rf: (f64, f64),
}

impl AnchorPoints {
    pub fn get(&self, class: usize) -> (f64, f64) {
        match class {
            0 => self.lf,
            1 => self.f,
            _ => self.rf,
        }
    }
}

pub fn anchor_points(pose: &VehiclePose) -> AnchorPoints {
    let at = |reach: f64, angle: f64| (pose.x + reach * angle.cos(), pose.y + reach * angle.sin());
    AnchorPoints {
        lf: at(10.0, pose.phi - 0.2),
        f: at(20.0, pose.phi),
        rf: at(10.0, pose.phi + 0.2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualObstacle {
    pub disc: ObstacleDisc,
    /// Control step at which the report arrived.
    pub created_at: u64,
    pub marker: Vec<i8>,
}

/// World-fixed discs created from obstacle reports, with the per-direction
/// report counts `a = [a_LF, a_F, a_RF]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualObstacleSet {
    pub base_radius: f64,
    pub accumulation: VirtualAccumulation,
    pub counts: [u32; 3],
    pub obstacles: Vec<VirtualObstacle>,
}

impl VirtualObstacleSet {
    pub fn new(base_radius: f64, accumulation: VirtualAccumulation) -> Self {
        Self { base_radius, accumulation, counts: [0; 3], obstacles: Vec::new() }
    }

    pub fn discs(&self) -> Vec<ObstacleDisc> {
        self.obstacles.iter().map(|o| o.disc).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }
}

/// Adds the disc for one spatial report made at `pose_at_report`.
///
/// The marker must select exactly one of LF, F, RF with `+1`. Existing discs
/// are kept unchanged.
pub fn spawn_virtual_obstacles(
    pose_at_report: &VehiclePose,
    marker: &[i8],
    existing: &VirtualObstacleSet,
    step: u64,
) -> Result<VirtualObstacleSet, ScenarioError> {
    let class = match marker {
        [1, 0, 0] => 0,
        [0, 1, 0] => 1,
        [0, 0, 1] => 2,
        _ => return Err(ScenarioError::InvalidSpatialMarker(marker.to_vec())),
    };
    let mut next = existing.clone();
    next.counts[class] += 1;
    let radius = match next.accumulation {
        VirtualAccumulation::GrowRadius => next.base_radius * f64::from(next.counts[class]),
        VirtualAccumulation::UnitDisc => next.base_radius,
    };
    let (cx, cy) = anchor_points(pose_at_report).get(class);
    next.obstacles.push(VirtualObstacle {
        disc: ObstacleDisc::new(cx, cy, radius),
        created_at: step,
        marker: marker.to_vec(),
    });
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn nav_environments_match_published_layout() {
        let a = build_nav_env(NavEnvId::A);
        assert_eq!(a.vase, ObstacleDisc::new(-1.0, -3.0, 0.5));
        assert_eq!(a.toy, ObstacleDisc::new(-3.0, -1.0, 0.5));
        assert_eq!(a.start, NavState::new(-5.0, -5.0, 0.0, 0.0));
        assert_eq!(a.theta0, [0.4, 0.4]);
        assert_eq!(a.dt, 0.2);
        let b = build_nav_env(NavEnvId::B);
        assert_eq!(b.vase, ObstacleDisc::new(-1.0, -4.0, 0.5));
        assert_eq!(b.toy, ObstacleDisc::new(1.5, -3.0, 0.5));
        assert_eq!(b.start, NavState::new(0.0, -10.0, 0.0, 0.0));
        assert_eq!(b.safety_margin, 0.5);
        assert!("C".parse::<NavEnvId>().is_err());
    }

    #[test]
    fn driving_cases_match_published_layout() {
        let one = build_driving_scenario(DrivingCaseId::One);
        assert_abs_diff_eq!(one.start_pose.phi, -PI / 2.0);
        assert_eq!(one.start_pose.position(), (106.0, 85.0));
        assert_eq!(one.recognized.center(), (107.0, 65.0));
        assert_eq!(one.unrecognized.center(), (105.0, 22.0));
        assert_eq!(one.goal_center, (106.0, -25.0));
        assert_eq!(one.mppi.temperature, 1.0);
        assert_eq!((one.mppi.n_samples, one.mppi.horizon), (500, 50));
        assert_eq!((one.mppi.input_min[0], one.mppi.input_max[0], one.mppi.sigma), (-1.0, 1.0, 0.5));
        assert_eq!(one.dt, 0.04);
        assert_eq!(one.wheelbase, 13.90);
        assert_eq!(one.w_obs, 1000.0);
        assert_eq!(one.prompt_schedule.entries()[0].text, "obstacle in front!");

        let two = build_driving_scenario(DrivingCaseId::Two);
        assert_abs_diff_eq!(two.start_pose.phi, -120.0f64.to_radians(), epsilon = 1e-15);
        assert_eq!(two.start_pose.position(), (104.0, 85.0));
        assert_eq!(
            two.prompt_schedule.entries()[0].text,
            "an obstacle is present in the right frontal area."
        );
        assert!("3".parse::<DrivingCaseId>().is_err());
    }

    #[test]
    fn controller_never_sees_unrecognized_obstacle() {
        for id in [DrivingCaseId::One, DrivingCaseId::Two] {
            let sc = build_driving_scenario(id);
            let mut set = VirtualObstacleSet::new(sc.virtual_radius, sc.accumulation);
            for m in [[1, 0, 0], [0, 1, 0], [0, 0, 1]] {
                set = spawn_virtual_obstacles(&sc.start_pose, &m, &set, 3).unwrap();
            }
            let view = sc.controller_view(&set);
            let hidden = sc.unrecognized.center();
            assert!(view.recognized.iter().chain(&view.virtual_discs).all(|d| d.center() != hidden));
            assert_eq!(view.recognized, vec![sc.recognized]);
        }
    }

    #[test]
    fn anchor_examples() {
        let a = anchor_points(&VehiclePose::new(0.0, 0.0, 0.0));
        assert_eq!(a.f, (20.0, 0.0));
        assert_abs_diff_eq!(a.rf.0, 9.8007, epsilon = 1e-4);
        assert_abs_diff_eq!(a.rf.1, 1.9867, epsilon = 1e-4);
        let a = anchor_points(&VehiclePose::new(0.0, 0.0, PI / 2.0));
        assert_abs_diff_eq!(a.f.0, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.f.1, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn spawn_examples() {
        let empty = VirtualObstacleSet::new(4.0, VirtualAccumulation::GrowRadius);
        let s = spawn_virtual_obstacles(&VehiclePose::new(0.0, 0.0, 0.0), &[0, 0, 1], &empty, 0).unwrap();
        assert_eq!(s.obstacles.len(), 1);
        assert_abs_diff_eq!(s.obstacles[0].disc.cx, 9.8007, epsilon = 1e-4);
        assert_abs_diff_eq!(s.obstacles[0].disc.cy, 1.9867, epsilon = 1e-4);
        assert_eq!(s.obstacles[0].disc.radius, 4.0);

        let pose = VehiclePose::new(106.0, 60.0, -PI / 2.0);
        let s = spawn_virtual_obstacles(&pose, &[0, 1, 0], &empty, 10).unwrap();
        assert_abs_diff_eq!(s.obstacles[0].disc.cx, 106.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.obstacles[0].disc.cy, 40.0, epsilon = 1e-12);
        assert_eq!(s.obstacles[0].disc.radius, 4.0);

        let s2 = spawn_virtual_obstacles(&VehiclePose::new(106.0, 50.0, -PI / 2.0), &[0, 1, 0], &s, 20).unwrap();
        assert_eq!(s2.obstacles.len(), 2);
        assert_eq!(s2.obstacles[0], s.obstacles[0]);
        assert_eq!(s2.obstacles[1].disc.radius, 8.0);
        assert_eq!(s2.counts, [0, 2, 0]);

        let unit = VirtualObstacleSet::new(4.0, VirtualAccumulation::UnitDisc);
        let u1 = spawn_virtual_obstacles(&pose, &[0, 1, 0], &unit, 0).unwrap();
        let u2 = spawn_virtual_obstacles(&pose, &[0, 1, 0], &u1, 1).unwrap();
        assert_eq!(u2.obstacles[1].disc.radius, 4.0);
    }

    #[test]
    fn spawn_rejects_non_spatial_markers() {
        let empty = VirtualObstacleSet::new(4.0, VirtualAccumulation::GrowRadius);
        let pose = VehiclePose::new(0.0, 0.0, 0.0);
        for bad in [&[0i8, 0, 0][..], &[1, 1, 0], &[-1, 0, 0], &[1, 0]] {
            assert!(spawn_virtual_obstacles(&pose, bad, &empty, 0).is_err());
        }
    }

    proptest! {
        #[test]
        fn anchor_distances_are_exact(x in -200.0f64..200.0, y in -200.0f64..200.0, phi in -3.2f64..3.2) {
            let pose = VehiclePose::new(x, y, phi);
            let a = anchor_points(&pose);
            let d = |p: (f64, f64)| (p.0 - x).hypot(p.1 - y);
            prop_assert!((d(a.lf) - 10.0).abs() < 1e-9);
            prop_assert!((d(a.rf) - 10.0).abs() < 1e-9);
            prop_assert!((d(a.f) - 20.0).abs() < 1e-9);
        }

        #[test]
        fn virtual_discs_stay_world_fixed(x in -50.0f64..50.0, phi in -3.0f64..3.0, later in -50.0f64..50.0) {
            let empty = VirtualObstacleSet::new(4.0, VirtualAccumulation::GrowRadius);
            let s = spawn_virtual_obstacles(&VehiclePose::new(x, 0.0, phi), &[0, 0, 1], &empty, 0).unwrap();
            let s2 = spawn_virtual_obstacles(&VehiclePose::new(later, 5.0, -phi), &[1, 0, 0], &s, 9).unwrap();
            prop_assert_eq!(s2.obstacles[0].clone(), s.obstacles[0].clone());
        }
    }
}
