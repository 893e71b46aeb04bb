//! Cost terms for the two controller families: a barrier-penalized quadratic
//! cost for navigation and a goal/obstacle cost for driving.

use serde::{Deserialize, Serialize};

use crate::plant::NavState;

/// Circular exclusion region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleDisc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl ObstacleDisc {
    pub const fn new(cx: f64, cy: f64, radius: f64) -> Self {
        Self { cx, cy, radius }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn center_distance(&self, p: (f64, f64)) -> f64 {
        (p.0 - self.cx).hypot(p.1 - self.cy)
    }

    /// Closed-disc membership.
    #[inline]
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let dx = p.0 - self.cx;
        let dy = p.1 - self.cy;
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// h(x) = (x1 - cx)^2 + (x2 - cy)^2 - R^2; non-negative outside the margin.
#[inline]
pub fn cbf_value(state: &NavState, obstacle: &ObstacleDisc) -> f64 {
    let dx = state.x1 - obstacle.cx;
    let dy = state.x2 - obstacle.cy;
    dx * dx + dy * dy - obstacle.radius * obstacle.radius
}

/// Barrier constraints with one decay parameter per obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbfSpec {
    pub obstacles: Vec<ObstacleDisc>,
    pub theta: Vec<f64>,
    pub penalty_weight: f64,
}

/// Soft penalty for violations of `h_{i+1} - h_i >= -theta_o h_i` along a
/// predicted trajectory, plus `|h|` for every state already inside a margin.
pub fn cbf_penalty(traj: &[NavState], spec: &CbfSpec) -> f64 {
    let mut total = 0.0;
    for (obstacle, &theta) in spec.obstacles.iter().zip(&spec.theta) {
        let mut prev = cbf_value(&traj[0], obstacle);
        if prev < 0.0 {
            total -= prev;
        }
        for state in &traj[1..] {
            let h = cbf_value(state, obstacle);
            let slack = (h - prev) + theta * prev;
            if slack < 0.0 {
                total -= slack;
            }
            if h < 0.0 {
                total -= h;
            }
            prev = h;
        }
    }
    spec.penalty_weight * total
}

/// Stage cost `x'x + u'u` summed over the predicted states `x(k+1..k+H)` with
/// the inputs `u(k..k+H-1)`, plus the terminal cost `1000 x(k+H)'x(k+H)`.
///
/// `traj` holds `H + 1` states starting with the current one, `inputs` holds
/// `H` two-dimensional inputs.
pub fn nav_cost(traj: &[NavState], inputs: &[f64]) -> f64 {
    const TERMINAL_WEIGHT: f64 = 1e3;
    let sq = |s: &NavState| s.x1 * s.x1 + s.x2 * s.x2 + s.v1 * s.v1 + s.v2 * s.v2;
    let stage: f64 = traj[1..]
        .iter()
        .zip(inputs.chunks_exact(2))
        .map(|(x, u)| sq(x) + u[0] * u[0] + u[1] * u[1])
        .sum();
    let terminal = traj.last().map(|x| TERMINAL_WEIGHT * sq(x)).unwrap_or(0.0);
    stage + terminal
}

/// Full navigation objective used by the MPPI solver.
pub fn nav_objective(traj: &[NavState], inputs: &[f64], cbf: &CbfSpec) -> f64 {
    nav_cost(traj, inputs) + cbf_penalty(traj, cbf)
}

/// Driving cost configuration. Only recognized and chat-reported discs are
/// visible to the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingCostSpec {
    pub goal_center: (f64, f64),
    pub goal_radius: f64,
    pub recognized: Vec<ObstacleDisc>,
    pub virtual_discs: Vec<ObstacleDisc>,
    pub w_obs: f64,
    pub rho: f64,
}

/// Recursive goal cost: squared distance to the goal accumulated until the
/// first position inside the goal disc, zero from there on.
pub fn goal_cost(positions: &[(f64, f64)], goal_center: (f64, f64), goal_radius: f64) -> f64 {
    let r2 = goal_radius * goal_radius;
    let mut total = 0.0;
    for p in positions {
        let d2 = (p.0 - goal_center.0).powi(2) + (p.1 - goal_center.1).powi(2);
        if d2 <= r2 {
            break;
        }
        total += d2;
    }
    total
}

/// Discounted obstacle indicator `sum_{k=1}^{H} rho^k I(z(k))`.
pub fn obstacle_cost(
    positions: &[(f64, f64)],
    recognized: &[ObstacleDisc],
    virtual_discs: &[ObstacleDisc],
    rho: f64,
    horizon: usize,
) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for p in positions.iter().take(horizon) {
        discount *= rho;
        if recognized.iter().chain(virtual_discs).any(|d| d.contains(*p)) {
            total += discount;
        }
    }
    total
}

impl DrivingCostSpec {
    /// `J_goal + w_obs J_obs` over the predicted positions `z(1..H)`.
    pub fn evaluate(&self, positions: &[(f64, f64)]) -> f64 {
        goal_cost(positions, self.goal_center, self.goal_radius)
            + self.w_obs
                * obstacle_cost(positions, &self.recognized, &self.virtual_discs, self.rho, positions.len())
    }
}
