//! Discrete-time plant models: a planar double integrator for navigation and
//! a kinematic bicycle with a PI speed loop for driving.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::PlantError;

/// Position and velocity of the navigation robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NavState {
    pub x1: f64,
    pub x2: f64,
    pub v1: f64,
    pub v2: f64,
}

impl NavState {
    pub const fn new(x1: f64, x2: f64, v1: f64, v2: f64) -> Self {
        Self { x1, x2, v1, v2 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.x2, self.v1, self.v2]
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x1, self.x2)
    }

    pub fn speed(&self) -> f64 {
        self.v1.hypot(self.v2)
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Acceleration command for the double integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NavInput {
    pub u1: f64,
    pub u2: f64,
}

impl NavInput {
    pub const fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }
}

/// Planar vehicle pose. `phi` is kept in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehiclePose {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl VehiclePose {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi: wrap_angle(phi) }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.phi.is_finite()
    }
}

/// State and gains of the PI speed loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedLoopState {
    /// Accumulated speed error (m).
    pub integrator: f64,
    pub kp: f64,
    pub ki: f64,
    pub v_target: f64,
    pub v_max: f64,
}

impl SpeedLoopState {
    pub fn new(kp: f64, ki: f64, v_target: f64, v_max: f64) -> Result<Self, PlantError> {
        if !(kp >= 0.0 && ki >= 0.0 && v_target >= 0.0 && v_max >= v_target) {
            return Err(PlantError::InvalidSpeedLoop { kp, ki, v_target, v_max });
        }
        Ok(Self { integrator: 0.0, kp, ki, v_target, v_max })
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

fn check_dt(dt: f64) -> Result<(), PlantError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(PlantError::InvalidTimeStep(dt))
    }
}

/// x(k+1) = A x(k) + B u(k) with A = [[I, dt I], [0, I]], B = [[0], [dt I]].
pub fn double_integrator_step(
    state: &NavState,
    input: &NavInput,
    dt: f64,
) -> Result<NavState, PlantError> {
    check_dt(dt)?;
    if !(input.u1.is_finite() && input.u2.is_finite()) {
        return Err(PlantError::NonFiniteInput);
    }
    Ok(double_integrator_step_unchecked(state, input.u1, input.u2, dt))
}

/// Same transition as [`double_integrator_step`] without argument checks, for rollouts.
#[inline]
pub fn double_integrator_step_unchecked(state: &NavState, u1: f64, u2: f64, dt: f64) -> NavState {
    NavState {
        x1: state.x1 + dt * state.v1,
        x2: state.x2 + dt * state.v2,
        v1: state.v1 + dt * u1,
        v2: state.v2 + dt * u2,
    }
}

/// Kinematic bicycle: position advances along the heading, heading by (v/L) dt delta.
pub fn bicycle_step(
    pose: &VehiclePose,
    speed: f64,
    steering: f64,
    dt: f64,
    wheelbase: f64,
) -> Result<VehiclePose, PlantError> {
    check_dt(dt)?;
    if !(wheelbase > 0.0 && wheelbase.is_finite()) {
        return Err(PlantError::InvalidWheelbase(wheelbase));
    }
    if !(speed.is_finite() && steering.is_finite()) {
        return Err(PlantError::NonFiniteInput);
    }
    Ok(bicycle_step_unchecked(pose, speed, steering, dt, wheelbase))
}

#[inline]
pub fn bicycle_step_unchecked(
    pose: &VehiclePose,
    speed: f64,
    steering: f64,
    dt: f64,
    wheelbase: f64,
) -> VehiclePose {
    let (s, c) = pose.phi.sin_cos();
    VehiclePose {
        x: pose.x + speed * dt * c,
        y: pose.y + speed * dt * s,
        phi: wrap_angle(pose.phi + speed / wheelbase * dt * steering),
    }
}

/// One PI update of the speed loop. The command is clamped to [0, v_max].
pub fn pi_speed_control(
    speed_loop: &SpeedLoopState,
    v_measured: f64,
    dt: f64,
) -> Result<(f64, SpeedLoopState), PlantError> {
    check_dt(dt)?;
    Ok(pi_speed_control_unchecked(speed_loop, v_measured, dt))
}

#[inline]
pub fn pi_speed_control_unchecked(
    speed_loop: &SpeedLoopState,
    v_measured: f64,
    dt: f64,
) -> (f64, SpeedLoopState) {
    let error = speed_loop.v_target - v_measured;
    let integrator = speed_loop.integrator + error * dt;
    let command = (v_measured + speed_loop.kp * error + speed_loop.ki * integrator)
        .clamp(0.0, speed_loop.v_max);
    (command, SpeedLoopState { integrator, ..*speed_loop })
}

/// Full driving plant state used by the closed loop and by MPPI rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveState {
    pub pose: VehiclePose,
    pub speed: f64,
    pub speed_loop: SpeedLoopState,
}

impl DriveState {
    pub fn is_finite(&self) -> bool {
        self.pose.is_finite() && self.speed.is_finite() && self.speed_loop.integrator.is_finite()
    }
}

/// Bicycle step at the measured speed followed by a PI update that sets the next speed.
#[inline]
pub fn drive_step(state: &DriveState, steering: f64, dt: f64, wheelbase: f64) -> DriveState {
    let pose = bicycle_step_unchecked(&state.pose, state.speed, steering, dt, wheelbase);
    let (speed, speed_loop) = pi_speed_control_unchecked(&state.speed_loop, state.speed, dt);
    DriveState { pose, speed, speed_loop }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const L: f64 = 13.90;

    #[test]
    fn double_integrator_examples() {
        let s = double_integrator_step(&NavState::new(0., 0., 1., 0.), &NavInput::new(0., 0.), 0.2)
            .unwrap();
        assert_eq!(s, NavState::new(0.2, 0., 1., 0.));
        let s = double_integrator_step(&NavState::default(), &NavInput::default(), 0.2).unwrap();
        assert_eq!(s, NavState::default());
        let s = double_integrator_step(&NavState::new(-5., -5., 0., 0.), &NavInput::new(1., 2.), 0.2)
            .unwrap();
        assert_abs_diff_eq!(s.x1, -5.0);
        assert_abs_diff_eq!(s.x2, -5.0);
        assert_abs_diff_eq!(s.v1, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.v2, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn double_integrator_rejects_bad_arguments() {
        let s = NavState::default();
        assert!(matches!(
            double_integrator_step(&s, &NavInput::new(f64::NAN, 0.), 0.2),
            Err(PlantError::NonFiniteInput)
        ));
        assert!(matches!(
            double_integrator_step(&s, &NavInput::new(0., f64::INFINITY), 0.2),
            Err(PlantError::NonFiniteInput)
        ));
        assert!(double_integrator_step(&s, &NavInput::default(), 0.0).is_err());
    }

    /// n steps equal one application of the n-step transition matrix.
    #[test]
    fn five_steps_match_matrix_power() {
        let dt = 0.2;
        let a = [
            [1.0, 0.0, dt, 0.0],
            [0.0, 1.0, 0.0, dt],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let mut p = [[0.0; 4]; 4];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..5 {
            let mut next = [[0.0; 4]; 4];
            for i in 0..4 {
                for j in 0..4 {
                    next[i][j] = (0..4).map(|m| a[i][m] * p[m][j]).sum();
                }
            }
            p = next;
        }
        let x0 = [1.5, -2.0, 0.3, 0.7];
        let expected: Vec<f64> = (0..4).map(|i| (0..4).map(|j| p[i][j] * x0[j]).sum()).collect();
        let mut s = NavState::new(x0[0], x0[1], x0[2], x0[3]);
        for _ in 0..5 {
            s = double_integrator_step(&s, &NavInput::default(), dt).unwrap();
        }
        for (got, want) in s.as_array().iter().zip(&expected) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn bicycle_examples() {
        let p = bicycle_step(&VehiclePose::new(0., 0., 0.), 10.0, 0.0, 0.04, L).unwrap();
        assert_abs_diff_eq!(p.x, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.0);
        assert_abs_diff_eq!(p.phi, 0.0);

        let p = bicycle_step(&VehiclePose::new(0., 0., PI / 2.), 10.0, 0.0, 0.04, L).unwrap();
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p.phi, PI / 2.);

        // 10 / 13.90 * 0.04 * 0.5 = 0.0143885 (hand computation to 4 decimals: 0.0144)
        let p = bicycle_step(&VehiclePose::new(0., 0., 0.), 10.0, 0.5, 0.04, L).unwrap();
        assert_abs_diff_eq!(p.x, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p.phi, 0.0144, epsilon = 5e-5);
        assert_abs_diff_eq!(p.phi, 0.014_388_489_208_633_094, epsilon = 1e-15);
    }

    #[test]
    fn bicycle_rejects_bad_wheelbase() {
        let p = VehiclePose::new(0., 0., 0.);
        assert!(matches!(bicycle_step(&p, 1.0, 0.0, 0.04, 0.0), Err(PlantError::InvalidWheelbase(_))));
        assert!(matches!(bicycle_step(&p, 1.0, 0.0, 0.04, -2.0), Err(PlantError::InvalidWheelbase(_))));
    }

    #[test]
    fn heading_wraps_into_half_open_interval() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-3.0 * PI / 2.0), PI / 2.0, epsilon = 1e-12);
        let p = bicycle_step(&VehiclePose::new(0., 0., PI - 0.01), 10.0, 1.0, 0.04, L).unwrap();
        assert!(p.phi > -PI && p.phi <= PI);
        assert!(p.phi < 0.0);
    }

    #[test]
    fn pi_examples() {
        let lp = SpeedLoopState::new(0.5, 0.1, 8.0, 15.0).unwrap();
        let (cmd, next) = pi_speed_control(&lp, 8.0, 0.04).unwrap();
        assert_eq!(cmd, 8.0);
        assert_eq!(next.integrator, 0.0);

        let lp = SpeedLoopState::new(0.5, 0.0, 8.0, 15.0).unwrap();
        let (cmd, _) = pi_speed_control(&lp, 0.0, 0.04).unwrap();
        assert_abs_diff_eq!(cmd, 4.0);
    }

    #[test]
    fn pi_command_grows_under_constant_deficit_until_clamp() {
        let mut lp = SpeedLoopState::new(0.5, 0.1, 8.0, 15.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        let mut clamped = false;
        for _ in 0..100 {
            let (cmd, next) = pi_speed_control(&lp, 5.0, 0.04).unwrap();
            lp = next;
            if clamped {
                assert_eq!(cmd, 15.0);
            } else {
                assert!(cmd > prev || cmd == 15.0);
                clamped = cmd == 15.0;
            }
            prev = cmd;
        }
        let invalid = SpeedLoopState::new(-1.0, 0.1, 8.0, 15.0);
        assert!(invalid.is_err());
    }

    #[test]
    fn pi_settles_at_default_gains() {
        let mut state = DriveState {
            pose: VehiclePose::new(0., 0., 0.),
            speed: 0.0,
            speed_loop: SpeedLoopState::new(0.5, 0.1, 8.0, 15.0).unwrap(),
        };
        for _ in 0..125 {
            state = drive_step(&state, 0.0, 0.04, L);
        }
        assert!((state.speed - 8.0).abs() < 0.05 * 8.0, "speed {}", state.speed);
    }

    proptest! {
        #[test]
        fn double_integrator_is_linear(
            s1 in prop::array::uniform4(-10.0f64..10.0),
            s2 in prop::array::uniform4(-10.0f64..10.0),
            u1 in prop::array::uniform2(-3.0f64..3.0),
            u2 in prop::array::uniform2(-3.0f64..3.0),
            a in -2.0f64..2.0,
        ) {
            let b = 1.0 - a;
            let st = |s: [f64; 4]| NavState::new(s[0], s[1], s[2], s[3]);
            let mix: Vec<f64> = (0..4).map(|i| a * s1[i] + b * s2[i]).collect();
            let mixed = double_integrator_step(
                &st([mix[0], mix[1], mix[2], mix[3]]),
                &NavInput::new(a * u1[0] + b * u2[0], a * u1[1] + b * u2[1]),
                0.2,
            ).unwrap();
            let r1 = double_integrator_step(&st(s1), &NavInput::new(u1[0], u1[1]), 0.2).unwrap();
            let r2 = double_integrator_step(&st(s2), &NavInput::new(u2[0], u2[1]), 0.2).unwrap();
            for ((m, x), y) in mixed.as_array().iter().zip(r1.as_array()).zip(r2.as_array()) {
                prop_assert!((m - (a * x + b * y)).abs() < 1e-9);
            }
        }

        #[test]
        fn bicycle_at_rest_is_fixed(x in -100.0f64..100.0, y in -100.0f64..100.0,
                                    phi in -3.1f64..3.1, delta in -1.0f64..1.0) {
            let p = VehiclePose::new(x, y, phi);
            prop_assert_eq!(bicycle_step(&p, 0.0, delta, 0.04, L).unwrap(), p);
        }

        #[test]
        fn bicycle_straight_keeps_heading(phi in -3.1f64..3.1, v in 0.0f64..20.0) {
            let p = VehiclePose::new(1.0, 2.0, phi);
            prop_assert_eq!(bicycle_step(&p, v, 0.0, 0.04, L).unwrap().phi, p.phi);
        }
    }
}
