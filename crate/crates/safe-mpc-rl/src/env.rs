//! Discrete-time double-integrator plant, obstacle world and stage costs.

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Planar state: position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
}

impl StateVec {
    pub fn new(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        Self { px, py, vx, vy }
    }

    pub fn zeros() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.px, self.py, self.vx, self.vy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn max_norm(&self) -> f64 {
        self.px
            .abs()
            .max(self.py.abs())
            .max(self.vx.abs())
            .max(self.vy.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }
}

/// Planar acceleration input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVec {
    pub ax: f64,
    pub ay: f64,
}

impl ActionVec {
    pub fn new(ax: f64, ay: f64) -> Self {
        Self { ax, ay }
    }

    pub fn zeros() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.ax, self.ay)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn max_norm(&self) -> f64 {
        self.ax.abs().max(self.ay.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.ay.is_finite()
    }
}

/// Zero-order-hold discretization of the 2D double integrator:
/// p+ = p + dt*v + dt^2/2 * a, v+ = v + dt*a.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    pub dt: f64,
    a_mat: Matrix4<f64>,
    b_mat: Matrix4x2<f64>,
}

impl DoubleIntegrator {
    pub fn new(dt: f64) -> Self {
        let mut a = Matrix4::identity();
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = Matrix4x2::zeros();
        let half = 0.5 * dt * dt;
        b[(0, 0)] = half;
        b[(1, 1)] = half;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        Self { dt, a_mat: a, b_mat: b }
    }

    pub fn a_matrix(&self) -> &Matrix4<f64> {
        &self.a_mat
    }

    pub fn b_matrix(&self) -> &Matrix4x2<f64> {
        &self.b_mat
    }

    /// One step of the discrete dynamics.
    pub fn step(&self, s: &StateVec, a: &ActionVec) -> Result<StateVec> {
        if !s.is_finite() {
            return Err(Error::NonFinite("state"));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("action"));
        }
        let next = self.a_mat * s.as_vector() + self.b_mat * a.as_vector();
        Ok(StateVec::from_vector(&next))
    }
}

/// Direction of travel for a horizontally moving obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionDir {
    Right,
    Left,
}

/// Obstacle motion law: fixed, or back-and-forth on a horizontal segment
/// with reflection at the endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObstacleMotion {
    Static,
    Horizontal {
        x_min: f64,
        x_max: f64,
        /// Displacement per environment step [m].
        speed: f64,
        direction: MotionDir,
    },
}

/// Circular obstacle; `h(s) = (px - cx)^2 + (py - cy)^2 - r^2` is its barrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cx0: f64,
    pub cy0: f64,
    pub radius: f64,
    pub motion: ObstacleMotion,
}

impl Obstacle {
    pub fn fixed(cx: f64, cy: f64, radius: f64) -> Self {
        Self { cx0: cx, cy0: cy, radius, motion: ObstacleMotion::Static }
    }

    pub fn moving_horizontal(
        cy: f64,
        x_min: f64,
        x_max: f64,
        speed: f64,
        direction: MotionDir,
    ) -> Self {
        let cx0 = match direction {
            MotionDir::Right => x_min,
            MotionDir::Left => x_max,
        };
        Self {
            cx0,
            cy0: cy,
            radius: 0.0,
            motion: ObstacleMotion::Horizontal { x_min, x_max, speed, direction },
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn is_moving(&self) -> bool {
        !matches!(self.motion, ObstacleMotion::Static)
    }

    /// Center after `t` steps of motion, reflecting at segment endpoints.
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        match self.motion {
            ObstacleMotion::Static => (self.cx0, self.cy0),
            ObstacleMotion::Horizontal { x_min, x_max, speed, direction } => {
                let span = x_max - x_min;
                if span <= 0.0 || speed == 0.0 {
                    return (self.cx0, self.cy0);
                }
                // Triangle-wave walk: unfold over a period of 2*span, then fold back.
                let signed = match direction {
                    MotionDir::Right => speed * t as f64,
                    MotionDir::Left => -speed * t as f64,
                };
                let raw = (self.cx0 - x_min) + signed;
                let period = 2.0 * span;
                let mut m = raw % period;
                if m < 0.0 {
                    m += period;
                }
                let x = if m <= span { x_min + m } else { x_min + (period - m) };
                (x, self.cy0)
            }
        }
    }
}

/// Plant, obstacles and hard limits of the control task. The goal is the origin.
#[derive(Debug, Clone)]
pub struct World {
    pub plant: DoubleIntegrator,
    pub obstacles: Vec<Obstacle>,
    /// Max-norm bound on the state (soft inside the MPC).
    pub state_bound: f64,
    /// Max-norm bound on the acceleration input (hard).
    pub action_bound: f64,
    pub start: StateVec,
}

impl World {
    pub fn num_obstacles(&self) -> usize {
        self.obstacles.len()
    }
}

/// Quadratic stage-cost weights `L(s, a) = s'Qs + a'Ra`.
#[derive(Debug, Clone)]
pub struct StageCostWeights {
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
}

impl StageCostWeights {
    pub fn from_diagonals(q_diag: [f64; 4], r_diag: [f64; 2]) -> Self {
        Self {
            q: Matrix4::from_diagonal(&Vector4::from(q_diag)),
            r: Matrix2::from_diagonal(&Vector2::from(r_diag)),
        }
    }

    pub fn stage_cost(&self, s: &StateVec, a: &ActionVec) -> f64 {
        let sv = s.as_vector();
        let av = a.as_vector();
        (sv.transpose() * self.q * sv)[0] + (av.transpose() * self.r * av)[0]
    }
}

/// Discounted cumulative cost of a rollout trace.
pub fn rollout_cost(trace: &[(StateVec, ActionVec)], weights: &StageCostWeights, zeta: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for (s, a) in trace {
        total += disc * weights.stage_cost(s, a);
        disc *= zeta;
    }
    total
}
